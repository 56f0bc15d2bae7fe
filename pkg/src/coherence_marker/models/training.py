"""Training loop, early stopping, checkpoints and grid search for the scorer families."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ..ingest import Narrative
from ..pairs import DEFAULT_PER_POSITIVE, enumerate_pairs, resample_negatives
from .backends import BigramLM, CapabilityError, GenerativeBackend, get_encoder, get_generator
from .heads import MLP, ConvMaxPool, bce_with_logits, make_optimizer
from .scorers import (
    DIRECTIONS,
    FAMILIES,
    ClassifierScorer,
    CNNScorer,
    DiscriminativeScorer,
    GenerativeScorer,
    SimilarityScorer,
)

log = logging.getLogger(__name__)

LEARNING_RATES = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4)
BATCH_SIZES = (16, 32, 64, 128)
OPTIMIZERS = ("adamw", "adam")
MARGINS = (3.0, 5.0, 7.0)
MAX_GRID_TRIALS = 20
TRAINABLE = ("classifier", "cnn", "discriminative")

# allowed grid-search values per ScorerConfig field
POOL_DOMAINS: dict[str, tuple] = {
    "learning_rate": LEARNING_RATES,
    "batch_size": BATCH_SIZES,
    "optimizer": OPTIMIZERS,
    "margin": MARGINS,
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScorerConfig:
    family: str = "discriminative"
    backend: str = "hash"
    margin: float = 5.0
    hidden: int | None = None  # defaults to the backend dimension
    learning_rate: float = 2e-4
    batch_size: int = 16
    optimizer: str = "adam"
    weight_decay: float = 0.01
    max_epochs: int = 50
    patience: int = 4
    runs: int = 3
    per_positive: int = DEFAULT_PER_POSITIVE
    direction: str = "forward"
    cnn_filters: int = 32
    cnn_width: int = 3
    finetune_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.runs < 1:
            raise ValueError("batch_size, max_epochs, patience and runs must be positive")

    def replace(self, **changes) -> "ScorerConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScorerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown scorer config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float | None
    validation_loss: float


@dataclass
class Checkpoint:
    config: ScorerConfig
    parameters: dict[str, np.ndarray]
    validation_loss: float
    epoch: int
    run_seed: int
    history: list[EpochLog] = field(default_factory=list)
    metrics: dict[str, Any] = field(default_factory=dict)

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.json`` (config, history, metrics) and ``<prefix>.npz`` (parameters)."""
        prefix = Path(prefix)
        meta = {
            "config": self.config.to_dict(),
            "validation_loss": self.validation_loss,
            "epoch": self.epoch,
            "run_seed": self.run_seed,
            "history": [dataclasses.asdict(h) for h in self.history],
            "metrics": self.metrics,
            "parameters": prefix.name + ".npz",
        }
        json_path = prefix.with_suffix(".json")
        npz_path = prefix.with_suffix(".npz")
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        with npz_path.open("wb") as fh:
            np.savez(fh, **self.parameters)
        return json_path, npz_path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path).with_suffix(".json")
        meta = json.loads(path.read_text())
        with np.load(path.with_name(meta["parameters"]), allow_pickle=False) as data:
            params = {k: data[k].copy() for k in data.files}
        return cls(
            ScorerConfig.from_dict(meta["config"]),
            params,
            meta["validation_loss"],
            meta["epoch"],
            meta["run_seed"],
            [EpochLog(**h) for h in meta["history"]],
            meta.get("metrics", {}),
        )

    def scorer(self):
        return build_scorer(self.config, parameters=self.parameters)


# --------------------------------------------------------------------------
# scorer construction

def build_scorer(
    config: ScorerConfig,
    rng: np.random.Generator | None = None,
    parameters: Mapping[str, np.ndarray] | None = None,
    texts: Sequence[str] | None = None,
    backend=None,
):
    """Instantiate a scorer for ``config``; fresh random heads unless ``parameters`` is given."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    fam = config.family
    if fam == "generative":
        if backend is None:
            if parameters is not None and "logits" in parameters:
                backend = BigramLM(vocab=[str(w) for w in parameters["vocab"]])
                backend.vocab = {str(w): i for i, w in enumerate(parameters["vocab"])}
                backend.logits = np.array(parameters["logits"], dtype=float)
            else:
                backend = get_generator(config.backend, texts)
        return GenerativeScorer(backend)
    backend = backend if backend is not None else get_encoder(config.backend)
    if fam == "similarity_baseline":
        return SimilarityScorer(backend)
    hidden = config.hidden or backend.dim
    if fam == "classifier":
        head = MLP(backend.pair_dim, hidden, rng)
        scorer = ClassifierScorer(backend, head)
    elif fam == "cnn":
        conv = ConvMaxPool(backend.dim, config.cnn_filters, config.cnn_width, rng)
        scorer = CNNScorer(backend, conv, MLP(config.cnn_filters, hidden, rng))
    else:
        scorer = DiscriminativeScorer(backend, MLP(5 * backend.dim, hidden, rng), config.direction)
    if parameters is not None:
        target = scorer.params
        missing = set(target) - set(parameters)
        if missing:
            raise TrainingError(f"checkpoint lacks parameters {sorted(missing)}")
        for k in target:
            if target[k].shape != parameters[k].shape:
                raise TrainingError(f"parameter {k} has shape {parameters[k].shape}, expected {target[k].shape}")
            target[k][...] = parameters[k]
    return scorer


# --------------------------------------------------------------------------
# data assembly

def _epoch_seed(run_seed: int, epoch: int) -> int:
    digest = hashlib.blake2b(f"{run_seed}:{epoch}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def labelled_pairs(narratives: Sequence[Narrative], per_positive: int | None = None, epoch_seed: int = 0):
    """``(pairs, labels)`` for the BCE families; all negatives when ``per_positive`` is None."""
    pairs, labels = [], []
    for nar in narratives:
        if len(nar) < 2:
            continue
        pos, neg = enumerate_pairs(nar)
        if per_positive is not None:
            neg = resample_negatives(nar, per_positive, epoch_seed)
        for p in pos:
            pairs.append(p.texts(nar))
            labels.append(1.0)
        for p in neg:
            pairs.append(p.texts(nar))
            labels.append(0.0)
    return pairs, np.array(labels)


def matched_triples(narratives: Sequence[Narrative], per_positive: int | None = None, epoch_seed: int = 0):
    """``(anchor, positive partner, negative partner)`` texts sharing an anchor."""
    triples = []
    for nar in narratives:
        if len(nar) < 3:
            continue
        if per_positive is None:
            neg = enumerate_pairs(nar)[1]
        else:
            neg = resample_negatives(nar, per_positive, epoch_seed)
        texts = nar.texts()
        for p in neg:
            i = p.anchor_index
            triples.append((texts[i], texts[i + 1], texts[p.partner_index]))
    return triples


class _Objective:
    """Binds a scorer family to its training examples and loss."""

    def __init__(self, scorer, config: ScorerConfig):
        self.scorer = scorer
        self.config = config

    def examples(self, narratives, per_positive, epoch_seed) -> list:
        if self.config.family == "discriminative":
            return matched_triples(narratives, per_positive, epoch_seed)
        pairs, labels = labelled_pairs(narratives, per_positive, epoch_seed)
        return list(zip(pairs, labels))

    def loss_and_grads(self, batch: list):
        if self.config.family == "discriminative":
            return self.scorer.loss_and_grads(batch, self.config.margin)
        pairs = [b[0] for b in batch]
        labels = np.array([b[1] for b in batch])
        return self.scorer.loss_and_grads(pairs, labels)

    def loss(self, examples: list) -> float:
        if not examples:
            raise TrainingError("no evaluation examples")
        if self.config.family == "discriminative":
            return self.scorer.loss_and_grads(examples, self.config.margin)[0]
        pairs = [e[0] for e in examples]
        labels = np.array([e[1] for e in examples])
        return bce_with_logits(self.scorer.logits(pairs), labels)[0]


def evaluation_loss(scorer, config: ScorerConfig, narratives: Sequence[Narrative]) -> float | None:
    """Family training loss over all pairs of ``narratives``; None for untrained families."""
    if config.family in TRAINABLE:
        obj = _Objective(scorer, config)
        return obj.loss(obj.examples(narratives, None, 0))
    if config.family == "generative" and config.finetune_steps > 0:
        return conditional_loss(scorer.backend, coherent_texts(narratives))
    return None


# --------------------------------------------------------------------------
# early stopping and the loop

class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a new minimum."""

    def __init__(self, patience: int = 4):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; returns True if it set a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _check_finite(value: float, what: str, history: list[EpochLog]) -> None:
    if not math.isfinite(value):
        recent = ", ".join(f"epoch {h.epoch}: val={h.validation_loss:.4g}" for h in history[-3:])
        raise TrainingError(f"non-finite {what} ({value}); recent history: {recent or 'none'}")


def train_scorer(
    config: ScorerConfig,
    train: Sequence[Narrative],
    validation: Sequence[Narrative],
    run_seed: int | None = None,
    backend=None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> Checkpoint:
    """Train one run; returns the minimum-validation-loss checkpoint.

    Negatives are resampled every epoch; the validation loss is computed over
    every pair of the validation narratives.
    """
    if config.family not in TRAINABLE:
        raise TrainingError(f"family {config.family!r} has no training loop")
    run_seed = config.seed if run_seed is None else run_seed
    rng = np.random.default_rng(run_seed)
    scorer = build_scorer(config, rng, backend=backend)
    obj = _Objective(scorer, config)
    val_examples = obj.examples(validation, None, 0)
    if not val_examples:
        raise TrainingError("validation set yields no training examples")
    if not obj.examples(train, config.per_positive, 0):
        raise TrainingError("training set yields no training examples")

    params = scorer.params
    opt = make_optimizer(config.optimizer, params, config.learning_rate, config.weight_decay)
    history = [EpochLog(0, None, obj.loss(val_examples))]
    _check_finite(history[0].validation_loss, "initial validation loss", history)
    stopper = EarlyStopping(config.patience)
    best = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, config.max_epochs + 1):
        examples = obj.examples(train, config.per_positive, _epoch_seed(run_seed, epoch))
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            loss, grads = obj.loss_and_grads(batch)
            _check_finite(loss, f"training loss at epoch {epoch}", history)
            opt.step(params, grads)
            total += loss * len(batch)
            count += len(batch)
        val = obj.loss(val_examples)
        entry = EpochLog(epoch, total / count, val)
        history.append(entry)
        _check_finite(val, f"validation loss at epoch {epoch}", history)
        log.info("epoch %d train=%.4f val=%.4f", epoch, entry.train_loss, val)
        if on_epoch is not None:
            on_epoch(entry)
        if stopper.update(epoch, val):
            best = {k: v.copy() for k, v in params.items()}
        if stopper.should_stop:
            break

    for k in params:
        params[k][...] = best[k]
    return Checkpoint(config, best, stopper.best, stopper.best_epoch, run_seed, history)


def train_classifier(config: ScorerConfig, train, validation, run_seed=None, backend=None) -> Checkpoint:
    if config.family not in ("classifier", "cnn"):
        raise TrainingError("train_classifier expects the classifier or cnn family")
    return train_scorer(config, train, validation, run_seed, backend)


def train_discriminative(config: ScorerConfig, train, validation, run_seed=None, backend=None) -> Checkpoint:
    if config.family != "discriminative":
        raise TrainingError("train_discriminative expects the discriminative family")
    return train_scorer(config, train, validation, run_seed, backend)


def train_runs(config: ScorerConfig, train, validation, backend=None) -> list[Checkpoint]:
    """``config.runs`` independent runs seeded ``seed, seed + 1, ...``."""
    return [train_scorer(config, train, validation, config.seed + r, backend) for r in range(config.runs)]


# --------------------------------------------------------------------------
# generative fine-tuning

def coherent_texts(narratives: Sequence[Narrative]) -> list[tuple[str, str]]:
    out = []
    for nar in narratives:
        texts = nar.texts()
        out.extend(zip(texts[:-1], texts[1:]))
    return out


def conditional_loss(backend: GenerativeBackend, pairs: Sequence[tuple[str, str]]) -> float:
    return float(np.mean([backend.conditional_loss(a, b) for a, b in pairs]))


def finetune_generative(
    backend: GenerativeBackend,
    pairs: Sequence[tuple[str, str]],
    steps: int,
    learning_rate: float = 1.0,
    batch_size: int = 16,
    seed: int = 0,
) -> GenerativeBackend:
    """Return a copy of ``backend`` trained on the second utterance given the first."""
    if not backend.trainable:
        raise CapabilityError(f"backend {backend.name!r} does not support conditional training")
    tuned = copy.deepcopy(backend)
    if steps <= 0:
        return tuned
    if not pairs:
        raise TrainingError("no coherent pairs to fine-tune on")
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        loss = tuned.train_step([pairs[i] for i in idx], learning_rate)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite conditional loss {loss}")
    return tuned


def generative_checkpoint(config: ScorerConfig, train, validation, texts=None) -> Checkpoint:
    """Zero-shot (``finetune_steps == 0``) or conditionally fine-tuned generative scorer."""
    backend = get_generator(config.backend, texts)
    if config.finetune_steps > 0:
        backend = finetune_generative(
            backend, coherent_texts(train), config.finetune_steps, batch_size=config.batch_size, seed=config.seed
        )
    params = {}
    if isinstance(backend, BigramLM):
        words = sorted(backend.vocab, key=backend.vocab.get)
        params = {"logits": backend.logits.copy(), "vocab": np.array(words)}
    val_pairs = coherent_texts(validation)
    val = conditional_loss(backend, val_pairs) if val_pairs else math.nan
    return Checkpoint(config, params, val, 0, config.seed)


# --------------------------------------------------------------------------
# grid search

@dataclass
class Trial:
    overrides: dict[str, Any]
    validation_loss: float
    epochs_run: int


def _validate_pool(pool: Mapping[str, Sequence]) -> None:
    if not pool or any(len(v) == 0 for v in pool.values()):
        raise ValueError("grid-search pool is empty")
    for key, values in pool.items():
        if key not in POOL_DOMAINS:
            raise ValueError(f"grid-search over {key!r} is not supported; choose from {sorted(POOL_DOMAINS)}")
        allowed = POOL_DOMAINS[key]
        bad = [v for v in values if v not in allowed]
        if bad:
            raise ValueError(f"pool values {bad} for {key!r} outside {allowed}")


def sample_trials(pool: Mapping[str, Sequence], max_trials: int = MAX_GRID_TRIALS, seed: int = 0) -> list[dict]:
    """Up to ``max_trials`` distinct configurations from the pool's product, in a seeded order."""
    _validate_pool(pool)
    keys = sorted(pool)
    combos = list(itertools.product(*(pool[k] for k in keys)))
    order = np.random.default_rng(seed).permutation(len(combos))[:max_trials]
    return [dict(zip(keys, combos[i])) for i in order]


def grid_search(
    base: ScorerConfig,
    pool: Mapping[str, Sequence],
    train: Sequence[Narrative],
    validation: Sequence[Narrative],
    max_trials: int = MAX_GRID_TRIALS,
    seed: int = 0,
    backend=None,
) -> tuple[ScorerConfig, list[Trial]]:
    """Train one run per sampled configuration; pick the lowest validation loss."""
    trials = []
    for overrides in sample_trials(pool, max_trials, seed):
        ckpt = train_scorer(base.replace(**overrides), train, validation, base.seed, backend)
        trials.append(Trial(overrides, ckpt.validation_loss, len(ckpt.history) - 1))
        log.info("trial %s -> val %.4f", overrides, ckpt.validation_loss)
    best = min(range(len(trials)), key=lambda i: trials[i].validation_loss)
    return base.replace(**trials[best].overrides), trials


def write_trials(trials: Sequence[Trial], path: str | Path) -> None:
    keys = sorted({k for t in trials for k in t.overrides})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([*keys, "validation_loss", "epochs_run"])
        for t in trials:
            w.writerow([t.overrides.get(k, "") for k in keys] + [repr(float(t.validation_loss)), t.epochs_run])
