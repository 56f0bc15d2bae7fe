"""Coherent/incoherent utterance-pair construction and subject-level splits."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import Corpus, Narrative

SPLITS = ("train", "validation", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
DEFAULT_PER_POSITIVE = 7
PAIR_COLUMNS = ("narrative_ref", "anchor_index", "partner_index", "label", "text_1", "text_2")


class PairError(ValueError):
    pass


class Label(str, enum.Enum):
    COHERENT = "coherent"
    INCOHERENT = "incoherent"


@dataclass(frozen=True, order=True)
class UtterancePair:
    narrative_ref: str
    anchor_index: int
    partner_index: int
    label: Label = field(compare=False)

    def __post_init__(self):
        gap = self.partner_index - self.anchor_index
        if self.label is Label.COHERENT and gap != 1:
            raise PairError(f"coherent pair must be adjacent, got gap {gap}")
        if self.label is Label.INCOHERENT and gap < 2:
            raise PairError(f"incoherent pair must be forward and non-adjacent, got gap {gap}")

    @property
    def coherent(self) -> bool:
        return self.label is Label.COHERENT

    def texts(self, narrative: Narrative) -> tuple[str, str]:
        return narrative.utterances[self.anchor_index].text, narrative.utterances[self.partner_index].text


def enumerate_pairs(narrative: Narrative) -> tuple[list[UtterancePair], list[UtterancePair]]:
    """All adjacent pairs and all forward non-adjacent pairs of one narrative."""
    k = len(narrative)
    if k < 2:
        raise PairError(f"narrative {narrative.ref} has {k} utterance(s); need at least 2")
    ref = narrative.ref
    coherent = [UtterancePair(ref, i, i + 1, Label.COHERENT) for i in range(k - 1)]
    incoherent = [
        UtterancePair(ref, i, j, Label.INCOHERENT) for i in range(k - 2) for j in range(i + 2, k)
    ]
    return coherent, incoherent


def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def resample_negatives(narrative: Narrative, per_positive: int, epoch_seed: int) -> list[UtterancePair]:
    """Draw up to ``per_positive`` anchor-sharing negatives for every adjacent pair.

    Sampling is without replacement within each anchor's pool
    ``{(i, j) : j >= i + 2}`` and is reproducible from ``epoch_seed`` and the
    narrative identity.
    """
    if per_positive < 1:
        raise PairError("per_positive must be >= 1")
    k = len(narrative)
    rng = np.random.default_rng([epoch_seed & 0xFFFFFFFF, _stable_int(narrative.ref)])
    out = []
    for i in range(max(k - 2, 0)):
        pool = np.arange(i + 2, k)
        if per_positive < pool.size:
            pool = np.sort(rng.choice(pool, size=per_positive, replace=False))
        out.extend(UtterancePair(narrative.ref, i, int(j), Label.INCOHERENT) for j in pool)
    return out


# --------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitManifest:
    seed: int
    assignment: Mapping[str, str]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def subjects(self, split: str) -> list[str]:
        return sorted(s for s, v in self.assignment.items() if v == split)

    def counts(self) -> dict[str, int]:
        return {name: len(self.subjects(name)) for name in SPLITS}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "assignment": dict(sorted(self.assignment.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SplitManifest":
        return cls(int(data["seed"]), dict(data["assignment"]), tuple(data["ratios"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    quotas = [total * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    # every split with a positive ratio gets at least one subject
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_by_subject(
    corpus: Corpus, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> SplitManifest:
    """Partition subjects (never individual narratives) into train/validation/test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise PairError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    subjects = sorted(corpus.by_subject())
    needed = sum(1 for r in ratios if r > 0)
    if len(subjects) < needed:
        raise PairError(f"{len(subjects)} subject(s) cannot fill {needed} splits")
    counts = _largest_remainder(len(subjects), ratios)
    order = np.random.default_rng(seed).permutation(len(subjects))
    assignment: dict[str, str] = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for idx in order[start : start + count]:
            assignment[subjects[idx]] = name
        start += count
    return SplitManifest(seed, assignment, tuple(float(r) for r in ratios))


# --------------------------------------------------------------------------
# export

def export_pairs(pairs: Iterable[UtterancePair], corpus: Corpus | Mapping[str, Narrative], path: str | Path) -> int:
    """Write pairs as a tab-separated file ordered by (narrative, anchor, partner).

    Returns the number of records written.
    """
    lookup = {n.ref: n for n in corpus} if isinstance(corpus, Corpus) else corpus
    rows = sorted(pairs)
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(PAIR_COLUMNS)
            for p in rows:
                t1, t2 = p.texts(lookup[p.narrative_ref])
                writer.writerow([p.narrative_ref, p.anchor_index, p.partner_index, p.label.value, t1, t2])
    except OSError as exc:
        raise OSError(f"cannot write pair file {path}: {exc}") from exc
    return len(rows)


def read_pairs(path: str | Path) -> list[tuple[UtterancePair, str, str]]:
    """Read a pair file back as ``(pair, text_1, text_2)`` tuples."""
    out = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            pair = UtterancePair(
                row["narrative_ref"], int(row["anchor_index"]), int(row["partner_index"]), Label(row["label"])
            )
            out.append((pair, row["text_1"], row["text_2"]))
    return out


def corpus_pairs(corpus: Corpus) -> tuple[list[UtterancePair], list[UtterancePair]]:
    """Exhaustive pairs over every narrative with at least two utterances."""
    pos: list[UtterancePair] = []
    neg: list[UtterancePair] = []
    for nar in corpus:
        if len(nar) < 2:
            continue
        c, i = enumerate_pairs(nar)
        pos.extend(c)
        neg.extend(i)
    return pos, neg
