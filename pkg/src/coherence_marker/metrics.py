"""Score summaries for coherent vs incoherent pairs: %Δ, temporal and entire accuracy, gap significance."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import Narrative
from .pairs import Label, UtterancePair, enumerate_pairs
from .stats import mann_whitney

TEMPORAL_MODES = ("mean_counterpart", "all_counterparts")
ALPHA = 0.05


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredPair:
    pair: UtterancePair
    score: float
    scorer: str = ""


@dataclass(frozen=True)
class AccuracyResult:
    value: float
    correct: int
    total: int
    excluded: int  # anchors or narratives without counterparts


@dataclass
class MetricsRow:
    scorer: str
    avg_f_pos: float
    avg_f_neg: float
    pct_delta: float
    pct_delta_per_anchor: float | None
    acc_temp: float
    acc_temp_all: float
    acc_entire: float
    avg_loss: float | None
    gap_p_value: float
    significant: bool
    n_pos: int
    n_neg: int
    excluded_anchors: int
    excluded_narratives: int
    runs: int = 1


def pct_delta(f_pos: float, f_neg: float) -> float:
    """Absolute difference of two scores as a percentage of their mean magnitude."""
    mean = (f_pos + f_neg) / 2.0
    if mean == 0:
        raise MetricsError("pct_delta undefined: the two scores average to zero")
    return abs(f_pos - f_neg) / abs(mean) * 100.0


def score_pairs(scorer, narratives: Iterable[Narrative], scorer_id: str = "") -> list[ScoredPair]:
    """Score every adjacent and forward non-adjacent pair of each narrative."""
    out = []
    for nar in narratives:
        if len(nar) < 2:
            continue
        pos, neg = enumerate_pairs(nar)
        pairs = pos + neg
        scores = scorer.score([p.texts(nar) for p in pairs])
        out.extend(ScoredPair(p, float(s), scorer_id) for p, s in zip(pairs, scores))
    return out


def _split(scored: Iterable[ScoredPair]) -> tuple[np.ndarray, np.ndarray]:
    pos, neg = [], []
    for sp in scored:
        (pos if sp.pair.label is Label.COHERENT else neg).append(sp.score)
    return np.array(pos, dtype=float), np.array(neg, dtype=float)


def _by_anchor(scored: Iterable[ScoredPair]) -> dict[tuple[str, int], tuple[list[float], list[float]]]:
    groups: dict[tuple[str, int], tuple[list[float], list[float]]] = defaultdict(lambda: ([], []))
    for sp in scored:
        pos, neg = groups[(sp.pair.narrative_ref, sp.pair.anchor_index)]
        (pos if sp.pair.label is Label.COHERENT else neg).append(sp.score)
    return groups


def temporal_accuracy(scored: Sequence[ScoredPair], mode: str = "mean_counterpart") -> AccuracyResult:
    """Fraction of adjacent pairs that beat their anchor-sharing non-adjacent counterparts.

    ``mean_counterpart`` compares with the counterparts' mean, ``all_counterparts``
    requires beating each one. Ties count as wrong.
    """
    if mode not in TEMPORAL_MODES:
        raise MetricsError(f"mode must be one of {TEMPORAL_MODES}")
    if not scored:
        raise MetricsError("no scored pairs")
    correct = total = excluded = 0
    for pos, neg in _by_anchor(scored).values():
        if not pos:
            continue
        if not neg:
            excluded += len(pos)
            continue
        ref = float(np.mean(neg)) if mode == "mean_counterpart" else max(neg)
        for f in pos:
            total += 1
            correct += f > ref
    if total == 0:
        raise MetricsError("no adjacent pair has a non-adjacent counterpart")
    return AccuracyResult(correct / total, correct, total, excluded)


def entire_accuracy(scored: Sequence[ScoredPair]) -> AccuracyResult:
    """Fraction of narratives whose mean adjacent score beats their mean non-adjacent score."""
    groups: dict[str, list[ScoredPair]] = defaultdict(list)
    for sp in scored:
        groups[sp.pair.narrative_ref].append(sp)
    correct = total = excluded = 0
    for items in groups.values():
        pos, neg = _split(items)
        if pos.size == 0 or neg.size == 0:
            excluded += 1
            continue
        total += 1
        correct += pos.mean() > neg.mean()
    if total == 0:
        raise MetricsError("no narrative has both adjacent and non-adjacent pairs")
    return AccuracyResult(correct / total, correct, total, excluded)


def pct_delta_per_anchor(scored: Sequence[ScoredPair]) -> float | None:
    """Mean over anchors of pct_delta(adjacent score, mean counterpart score); None if undefined everywhere."""
    vals = []
    for pos, neg in _by_anchor(scored).values():
        if not pos or not neg:
            continue
        try:
            vals.append(pct_delta(float(np.mean(pos)), float(np.mean(neg))))
        except MetricsError:
            continue
    return float(np.mean(vals)) if vals else None


def metrics_row(
    scorer_id: str, scored: Sequence[ScoredPair], loss: float | None = None, alternative: str = "two-sided"
) -> MetricsRow:
    pos, neg = _split(scored)
    if pos.size == 0 or neg.size == 0:
        raise MetricsError(f"scorer {scorer_id!r}: need both coherent and incoherent scores")
    f_pos, f_neg = float(pos.mean()), float(neg.mean())
    try:
        pd = pct_delta(f_pos, f_neg)
    except MetricsError:
        pd = math.nan
    temp = temporal_accuracy(scored, "mean_counterpart")
    temp_all = temporal_accuracy(scored, "all_counterparts")
    entire = entire_accuracy(scored)
    gap = mann_whitney(pos, neg, alternative=alternative)
    return MetricsRow(
        scorer=scorer_id,
        avg_f_pos=f_pos,
        avg_f_neg=f_neg,
        pct_delta=pd,
        pct_delta_per_anchor=pct_delta_per_anchor(scored),
        acc_temp=temp.value,
        acc_temp_all=temp_all.value,
        acc_entire=entire.value,
        avg_loss=None if loss is None else float(loss),
        gap_p_value=gap.p_value,
        significant=gap.p_value < ALPHA,
        n_pos=int(pos.size),
        n_neg=int(neg.size),
        excluded_anchors=temp.excluded,
        excluded_narratives=entire.excluded,
    )


def metrics_report(
    scored: Mapping[str, Sequence[ScoredPair]],
    losses: Mapping[str, float | None] | None = None,
    alternative: str = "two-sided",
) -> list[MetricsRow]:
    """One row per scorer, in sorted scorer order."""
    losses = losses or {}
    return [metrics_row(name, scored[name], losses.get(name), alternative) for name in sorted(scored)]


def average_rows(rows: Sequence[MetricsRow], scorer_id: str | None = None) -> MetricsRow:
    """Average the numeric columns over repeated runs; significant only if every run was."""
    if not rows:
        raise MetricsError("no rows to average")

    def mean(name):
        vals = [getattr(r, name) for r in rows]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    out = {}
    for f in fields(MetricsRow):
        if f.name == "scorer":
            out[f.name] = scorer_id or rows[0].scorer
        elif f.name == "significant":
            out[f.name] = all(r.significant for r in rows)
        elif f.name == "runs":
            out[f.name] = len(rows)
        elif f.name in ("n_pos", "n_neg", "excluded_anchors", "excluded_narratives"):
            out[f.name] = rows[0].__dict__[f.name]
        else:
            out[f.name] = mean(f.name)
    return MetricsRow(**out)


METRIC_COLUMNS = (
    "scorer", "avg_f_pos", "avg_f_neg", "pct_delta", "pct_delta_per_anchor", "acc_temp", "acc_temp_all",
    "acc_entire", "avg_loss", "gap_p_value", "significant", "n_pos", "n_neg", "runs",
)
_SCORE_COLS = {"avg_f_pos", "avg_f_neg", "avg_loss", "gap_p_value"}
_PCT_COLS = {"pct_delta", "pct_delta_per_anchor", "acc_temp", "acc_temp_all", "acc_entire"}


def _cell(name: str, value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if name in _PCT_COLS:
        # accuracies are stored as fractions and rendered as percentages
        pct = value * 100.0 if name.startswith("acc") else value
        return f"{pct:.1f}"
    if name == "gap_p_value":
        return f"{value:.3g}"
    if name in _SCORE_COLS:
        return f"{value:.3f}"
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)


def write_metrics_tsv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_cell(c, getattr(r, c)) for c in METRIC_COLUMNS])


def write_summary_json(rows: Sequence[MetricsRow], path: str | Path) -> None:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    data = {r.scorer: {k: clean(v) for k, v in asdict(r).items() if k != "scorer"} for r in rows}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
