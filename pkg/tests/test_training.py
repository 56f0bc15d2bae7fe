import math

import numpy as np
import pytest

from coherence_marker import synthetic
from coherence_marker.metrics import entire_accuracy, score_pairs
from coherence_marker.models import training
from coherence_marker.models.backends import BigramLM, CapabilityError, HashEncoder, UniformLM
from coherence_marker.models.training import (
    Checkpoint,
    EarlyStopping,
    ScorerConfig,
    TrainingError,
    build_scorer,
    finetune_generative,
    grid_search,
    matched_triples,
    sample_trials,
    train_classifier,
    train_discriminative,
    train_runs,
    write_trials,
)
from coherence_marker.pairs import split_by_subject


@pytest.fixture(scope="module")
def splits():
    corpus = synthetic.to_corpus(synthetic.healthy_subjects(60, seed=3))
    manifest = split_by_subject(corpus, (0.6, 0.2, 0.2), seed=0)
    return {name: list(corpus.subset(manifest.subjects(name))) for name in ("train", "validation", "test")}


FAST = ScorerConfig(backend="hash:dim=16", max_epochs=6, runs=1)


def test_early_stopping_patience_arithmetic():
    stop = EarlyStopping(4)
    stopped_at = None
    for epoch in range(1, 51):
        stop.update(epoch, 1.0)
        if stop.should_stop:
            stopped_at = epoch
            break
    assert stopped_at == 5 and stop.best_epoch == 1


def test_early_stopping_resets_on_improvement():
    stop = EarlyStopping(2)
    for epoch, loss in enumerate([3.0, 2.0, 2.5, 1.0, 1.0], start=1):
        stop.update(epoch, loss)
    assert stop.best_epoch == 4 and not stop.should_stop


def test_loop_stops_at_epoch_five_on_flat_validation(splits, monkeypatch):
    monkeypatch.setattr(training._Objective, "loss", lambda self, examples: 1.0)
    ckpt = train_discriminative(FAST.replace(max_epochs=50), splits["train"], splits["validation"])
    assert [h.epoch for h in ckpt.history][-1] == 5
    assert ckpt.epoch == 1


def test_discriminative_training_reduces_validation_loss(splits):
    ckpt = train_discriminative(FAST, splits["train"], splits["validation"])
    assert ckpt.validation_loss < ckpt.history[0].validation_loss
    assert ckpt.validation_loss == min(h.validation_loss for h in ckpt.history[1:])
    final_train = ckpt.history[ckpt.epoch].train_loss
    assert final_train < 2 * FAST.margin  # summed over both directions


def test_classifier_training_reduces_validation_loss(splits):
    cfg = FAST.replace(family="classifier")
    ckpt = train_classifier(cfg, splits["train"], splits["validation"])
    assert ckpt.validation_loss < ckpt.history[0].validation_loss


def test_family_mismatch_raises(splits):
    with pytest.raises(TrainingError):
        train_classifier(FAST, splits["train"], splits["validation"])
    with pytest.raises(TrainingError):
        train_discriminative(FAST.replace(family="cnn"), splits["train"], splits["validation"])


def test_empty_validation_raises(splits):
    with pytest.raises(TrainingError):
        train_discriminative(FAST, splits["train"], [])


def test_frozen_encoder_bit_identical(splits):
    enc = HashEncoder(16)
    before = {k: v.copy() for k, v in enc.parameters().items()}
    train_discriminative(FAST.replace(max_epochs=2), splits["train"], splits["validation"], backend=enc)
    after = enc.parameters()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_non_finite_loss_aborts(splits, monkeypatch):
    real = training._Objective.loss_and_grads

    def broken(self, batch):
        loss, grads = real(self, batch)
        return math.nan, grads

    monkeypatch.setattr(training._Objective, "loss_and_grads", broken)
    with pytest.raises(TrainingError, match="non-finite"):
        train_discriminative(FAST, splits["train"], splits["validation"])


def test_three_runs_distinct_seeds(splits):
    ckpts = train_runs(FAST.replace(max_epochs=2, runs=3), splits["train"], splits["validation"])
    assert [c.run_seed for c in ckpts] == [0, 1, 2]
    assert not np.array_equal(ckpts[0].parameters["W1"], ckpts[1].parameters["W1"])


def test_checkpoint_round_trip(splits, tmp_path):
    ckpt = train_discriminative(FAST.replace(max_epochs=2), splits["train"], splits["validation"])
    ckpt.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck.json")
    assert loaded.config == ckpt.config and loaded.epoch == ckpt.epoch
    assert loaded.history == ckpt.history
    pairs = [("the boy", "is on the stool"), ("a", "b")]
    assert np.array_equal(loaded.scorer().score(pairs), ckpt.scorer().score(pairs))


def test_build_scorer_rejects_wrong_shapes():
    with pytest.raises(TrainingError):
        build_scorer(FAST, parameters={"W1": np.zeros((2, 2)), "b1": np.zeros(2), "w2": np.zeros(2), "b2": np.zeros(1)})


def test_matched_triples_share_anchor(splits):
    nar = splits["train"][0]
    texts = nar.texts()
    for anchor, pos, neg in matched_triples([nar]):
        i = texts.index(anchor)
        assert texts[i + 1] == pos and neg in texts[i + 2 :]


# ---------------------------------------------------------------- grid search

def test_single_config_pool(splits):
    best, trials = grid_search(FAST, {"margin": [3.0]}, splits["train"], splits["validation"])
    assert len(trials) == 1 and best.margin == 3.0


def test_trial_sampling_deterministic():
    pool = {"learning_rate": list(training.LEARNING_RATES), "batch_size": list(training.BATCH_SIZES)}
    assert sample_trials(pool, 20, seed=4) == sample_trials(pool, 20, seed=4)
    assert len(sample_trials(pool, 20)) == 20
    assert len({tuple(sorted(t.items())) for t in sample_trials(pool, 20)}) == 20


@pytest.mark.parametrize("pool", [{}, {"margin": []}, {"margin": [4.0]}, {"hidden": [3]}])
def test_bad_pool_raises(pool):
    with pytest.raises(ValueError):
        sample_trials(pool)


def test_planted_optimum_selected(splits, tmp_path):
    # at a learning rate of 1e-5 the head barely moves in three epochs
    base = FAST.replace(max_epochs=3)
    best, trials = grid_search(base, {"learning_rate": [1e-5, 2e-4]}, splits["train"], splits["validation"])
    assert best.learning_rate == 2e-4
    write_trials(trials, tmp_path / "trials.tsv")
    assert len((tmp_path / "trials.tsv").read_text().splitlines()) == 3


# ---------------------------------------------------------------- generative fine-tuning

def test_finetune_zero_steps_identical():
    lm = BigramLM.fit(["the boy climbs", "the stool tips"])
    tuned = finetune_generative(lm, [("the boy", "climbs")], 0)
    assert tuned is not lm
    assert np.array_equal(tuned.logits, lm.logits)


def test_finetune_overfits_repeated_pair():
    lm = BigramLM.fit(["the boy climbs", "the stool tips", "water overflows"])
    pair = ("the boy", "climbs the stool")
    losses = [lm.conditional_loss(*pair)]
    current = lm
    for _ in range(5):
        current = finetune_generative(current, [pair] * 4, 1)
        losses.append(current.conditional_loss(*pair))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_finetune_capability_error():
    with pytest.raises(CapabilityError):
        finetune_generative(UniformLM(16), [("a", "b")], 1)


def test_held_out_entire_accuracy(splits):
    ckpt = train_discriminative(ScorerConfig(runs=1), splits["train"], splits["validation"])
    acc = entire_accuracy(score_pairs(ckpt.scorer(), splits["test"]))
    assert acc.value == 1.0
