"""Per-narrative coherence markers, longitudinal series, cohort summaries and the disruptive-pair analysis."""

from __future__ import annotations

import csv
import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import Diagnosis, Narrative, SessionMeta
from .metrics import ALPHA, MetricsError, pct_delta
from .stats import Description, TestResult, describe, mann_whitney, t_test

log = logging.getLogger(__name__)

QUANTITIES = ("marker", "delta_end_start", "delta_long")
LONG_MODES = ("within", "pooled")
COHORT_ORDER = (Diagnosis.HEALTHY, Diagnosis.MCI, Diagnosis.AD, Diagnosis.OTHER)


class MarkerError(ValueError):
    pass


@dataclass(frozen=True)
class NarrativeScores:
    """Adjacent-pair scores of one narrative; ``disruptive[i]`` flags the pair's second utterance."""

    meta: SessionMeta
    scores: tuple[float, ...]
    disruptive: tuple[bool, ...]

    @property
    def ref(self) -> str:
        return self.meta.ref

    @property
    def marker(self) -> float:
        return narrative_marker(self.scores)


@dataclass(frozen=True)
class MarkerSeries:
    subject_id: str
    diagnosis: Diagnosis
    visits: tuple[tuple[int, float], ...]
    sessions: tuple[SessionMeta, ...] = ()

    def __post_init__(self):
        if len(self.visits) < 2:
            raise MarkerError(f"subject {self.subject_id}: a series needs at least 2 visits")
        idx = [v for v, _ in self.visits]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise MarkerError(f"subject {self.subject_id}: visit indices must be strictly increasing")

    @property
    def values(self) -> np.ndarray:
        return np.array([m for _, m in self.visits], dtype=float)

    @classmethod
    def from_values(cls, values: Sequence[float], subject_id: str = "s", diagnosis=Diagnosis.OTHER) -> "MarkerSeries":
        return cls(subject_id, diagnosis, tuple((i + 1, float(v)) for i, v in enumerate(values)))


def narrative_marker(scores: Iterable[float]) -> float:
    """Unweighted mean of a narrative's adjacent-pair scores."""
    arr = np.asarray(list(scores), dtype=float)
    if arr.size == 0:
        raise MarkerError("narrative has no adjacent pairs to aggregate")
    return float(arr.mean())


def score_narratives(scorer, narratives: Iterable[Narrative]) -> list[NarrativeScores]:
    """Adjacent-pair scores per narrative; narratives shorter than 2 utterances are skipped."""
    out = []
    for nar in narratives:
        if len(nar) < 2:
            log.warning("narrative %s has fewer than 2 utterances; skipped", nar.ref)
            continue
        texts = nar.texts()
        try:
            scores = scorer.score(list(zip(texts[:-1], texts[1:])))
        except Exception as exc:
            raise MarkerError(f"scoring failed for narrative {nar.ref}: {exc}") from exc
        flags = tuple(u.disruptive for u in nar.utterances[1:])
        out.append(NarrativeScores(nar.meta, tuple(float(s) for s in scores), flags))
    return out


def subject_series(scored: Iterable[NarrativeScores], min_visits: int = 2) -> tuple[list[MarkerSeries], list[str]]:
    """Longitudinal series for subjects with at least ``min_visits`` narratives, plus excluded subject ids."""
    by_subject: dict[str, list[NarrativeScores]] = defaultdict(list)
    for ns in scored:
        by_subject[ns.meta.subject_id].append(ns)
    series, excluded = [], []
    for sid in sorted(by_subject):
        items = sorted(by_subject[sid], key=lambda ns: ns.meta.visit_index)
        if len(items) < max(min_visits, 2):
            excluded.append(sid)
            continue
        diagnoses = {ns.meta.diagnosis for ns in items}
        dx = items[-1].meta.diagnosis
        if len(diagnoses) > 1:
            log.warning("subject %s has mixed diagnoses %s; using the last visit's", sid, sorted(d.value for d in diagnoses))
        series.append(
            MarkerSeries(
                sid, dx, tuple((ns.meta.visit_index, ns.marker) for ns in items), tuple(ns.meta for ns in items)
            )
        )
    return series, excluded


def delta_end_start(series: MarkerSeries | Sequence[float]) -> float:
    v = _values(series)
    return float(v[-1] - v[0])


def delta_long(series: MarkerSeries | Sequence[float]) -> float:
    """Mean change between consecutive visits."""
    v = _values(series)
    if v.size == 2:
        return float(v[1] - v[0])
    return float(np.diff(v).mean())


def _values(series) -> np.ndarray:
    v = series.values if isinstance(series, MarkerSeries) else np.asarray(series, dtype=float)
    if v.size < 2:
        raise MarkerError("a change needs at least 2 visits")
    return v


# --------------------------------------------------------------------------
# cohort summaries

@dataclass
class CohortSummary:
    cohort: Diagnosis
    n_subjects: int
    n_narratives: int
    marker: Description
    delta_end_start: Description
    delta_long: Description


@dataclass(frozen=True)
class CohortComparison:
    quantity: str
    cohort_a: Diagnosis
    cohort_b: Diagnosis
    result: TestResult

    @property
    def significant(self) -> bool:
        return self.result.p_value < ALPHA


def _cohort_samples(series: Sequence[MarkerSeries], long_mode: str) -> dict[str, np.ndarray]:
    markers = [m for s in series for _, m in s.visits]
    if long_mode == "within":
        longs = [delta_long(s) for s in series]
    else:
        longs = [d for s in series for d in np.diff(s.values)]
    return {
        "marker": np.array(markers),
        "delta_end_start": np.array([delta_end_start(s) for s in series]),
        "delta_long": np.array(longs, dtype=float),
    }


def cohort_table(
    series: Sequence[MarkerSeries], long_mode: str = "within", ddof: int = 1, alternative: str = "two-sided"
) -> tuple[list[CohortSummary], list[CohortComparison]]:
    """Mean (std) per cohort of marker, Δ(end−start) and Δ(long), with pairwise Mann-Whitney tests.

    ``long_mode="within"`` averages consecutive changes within each subject
    first; ``"pooled"`` pools every consecutive change of the cohort.
    """
    if long_mode not in LONG_MODES:
        raise MarkerError(f"long_mode must be one of {LONG_MODES}")
    groups: dict[Diagnosis, list[MarkerSeries]] = defaultdict(list)
    for s in series:
        groups[s.diagnosis].append(s)
    samples = {}
    rows = []
    for dx in COHORT_ORDER:
        members = groups.get(dx, [])
        if not members:
            if dx is not Diagnosis.OTHER:
                log.warning("cohort %s has no series; omitted", dx.value)
            continue
        smp = samples[dx] = _cohort_samples(members, long_mode)
        rows.append(
            CohortSummary(
                dx,
                len(members),
                int(smp["marker"].size),
                describe(smp["marker"], ddof),
                describe(smp["delta_end_start"], ddof),
                describe(smp["delta_long"], ddof),
            )
        )
    tests = []
    for a, b in itertools.combinations(list(samples), 2):
        for q in QUANTITIES:
            tests.append(CohortComparison(q, a, b, mann_whitney(samples[a][q], samples[b][q], alternative=alternative)))
    return rows, tests


def significance_flags(tests: Sequence[CohortComparison]) -> dict[tuple[str, Diagnosis, Diagnosis], bool]:
    """Symmetric lookup ``(quantity, a, b) -> significant``."""
    flags = {}
    for t in tests:
        flags[(t.quantity, t.cohort_a, t.cohort_b)] = t.significant
        flags[(t.quantity, t.cohort_b, t.cohort_a)] = t.significant
    return flags


# --------------------------------------------------------------------------
# disruptive utterances

@dataclass
class DisruptiveReport:
    n_pairs: int
    n_disruptive: int
    disruptive: Description | None
    non_disruptive: Description | None
    pct_delta: float | None
    test: TestResult | None

    @property
    def fraction(self) -> float:
        return self.n_disruptive / self.n_pairs if self.n_pairs else 0.0

    @property
    def gap(self) -> float | None:
        if self.disruptive is None or self.non_disruptive is None:
            return None
        return self.non_disruptive.mean - self.disruptive.mean


def disruptive_analysis(scored: Iterable[NarrativeScores], ddof: int = 1, alternative: str = "two-sided") -> DisruptiveReport:
    """Compare adjacent-pair scores whose second utterance is flagged disruptive with the rest."""
    dis, non = [], []
    for ns in scored:
        for s, flag in zip(ns.scores, ns.disruptive):
            (dis if flag else non).append(s)
    n = len(dis) + len(non)
    if n == 0:
        raise MarkerError("no adjacent pairs to analyse")
    d_desc = describe(dis, ddof) if dis else None
    n_desc = describe(non, ddof) if non else None
    pd = test = None
    if dis and non:
        try:
            pd = pct_delta(n_desc.mean, d_desc.mean)
        except MetricsError:
            pd = None
        if len(dis) >= 2 and len(non) >= 2:
            test = t_test(dis, non, alternative)
    return DisruptiveReport(n, len(dis), d_desc, n_desc, pd, test)


# --------------------------------------------------------------------------
# exports

def _fmt(desc: Description | None) -> str:
    return "-" if desc is None else desc.fmt(3)


def write_marker_table(scored: Sequence[NarrativeScores], path: str | Path) -> None:
    rows = sorted(scored, key=lambda ns: (ns.meta.subject_id, ns.meta.visit_index))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["subject_id", "diagnosis", "visit_index", "marker", "n_pairs", "n_disruptive"])
        for ns in rows:
            w.writerow([ns.meta.subject_id, ns.meta.diagnosis.value, ns.meta.visit_index, f"{ns.marker:.6f}",
                        len(ns.scores), sum(ns.disruptive)])


def read_marker_table(path: str | Path) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = defaultdict(list)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            out[row["subject_id"]].append((int(row["visit_index"]), float(row["marker"])))
    return dict(out)


def write_cohort_tsv(rows: Sequence[CohortSummary], tests: Sequence[CohortComparison], path: str | Path) -> None:
    """Cohort rows followed by the pairwise comparison rows."""
    flags = significance_flags(tests)
    cohorts = [r.cohort for r in rows]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["cohort", "n_subjects", "n_narratives", "marker", "delta_end_start", "delta_long", "significant_vs"])
        for r in rows:
            sig = [
                f"{q}:{o.value}" for o in cohorts if o is not r.cohort for q in QUANTITIES if flags.get((q, r.cohort, o))
            ]
            w.writerow([r.cohort.value, r.n_subjects, r.n_narratives, _fmt(r.marker), _fmt(r.delta_end_start),
                        _fmt(r.delta_long), ",".join(sig) or "-"])
        w.writerow([])
        w.writerow(["quantity", "cohort_a", "cohort_b", "U", "p_value", "significant"])
        for t in tests:
            w.writerow([t.quantity, t.cohort_a.value, t.cohort_b.value, f"{t.result.statistic:.1f}",
                        f"{t.result.p_value:.3g}", "yes" if t.significant else "no"])


def write_disruptive_tsv(report: DisruptiveReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["n_pairs", "n_disruptive", "fraction_disruptive", "disruptive", "non_disruptive",
                    "pct_delta", "t", "p_value"])
        test = report.test
        w.writerow([
            report.n_pairs,
            report.n_disruptive,
            f"{report.fraction * 100:.1f}",
            _fmt(report.disruptive),
            _fmt(report.non_disruptive),
            "-" if report.pct_delta is None else f"{report.pct_delta:.1f}",
            "-" if test is None else f"{test.statistic:.3f}",
            "-" if test is None else f"{test.p_value:.3g}",
        ])
