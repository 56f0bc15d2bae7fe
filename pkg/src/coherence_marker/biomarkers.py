"""Bin subjects by clinical biomarker change and tabulate the coherence-marker change per bin."""

from __future__ import annotations

import csv
import itertools
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .marker import MarkerSeries, delta_end_start
from .metrics import ALPHA
from .stats import Description, TestResult, describe, mann_whitney

KINDS = ("MMSE_delta", "CDR_delta", "HDR_last")
UNBINNED = "unbinned"

_INTERVAL = re.compile(r"^\s*([\[(])\s*([^,\s]+)\s*,\s*([^\])\s]+)\s*([\])])\s*$")


class BinError(ValueError):
    pass


@dataclass(frozen=True)
class Bin:
    label: str
    lower: float
    upper: float
    lower_inclusive: bool = True
    upper_inclusive: bool = True

    def __post_init__(self):
        if self.lower > self.upper or (self.lower == self.upper and not (self.lower_inclusive and self.upper_inclusive)):
            raise BinError(f"bin {self.label!r} is empty: {self.interval}")

    def contains(self, value: float) -> bool:
        above = value >= self.lower if self.lower_inclusive else value > self.lower
        below = value <= self.upper if self.upper_inclusive else value < self.upper
        return above and below

    @property
    def interval(self) -> str:
        lo = "[" if self.lower_inclusive else "("
        hi = "]" if self.upper_inclusive else ")"
        return f"{lo}{_num(self.lower)},{_num(self.upper)}{hi}"


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def parse_interval(label: str, text: str) -> Bin:
    """``"[-6,2]"`` or ``"(0.5,1.5]"`` style notation; unicode minus accepted."""
    m = _INTERVAL.match(text.replace("−", "-"))
    if not m:
        raise BinError(f"cannot parse interval {text!r} for bin {label!r}")
    lo_br, lo, hi, hi_br = m.groups()
    try:
        return Bin(label, float(lo), float(hi), lo_br == "[", hi_br == "]")
    except ValueError as exc:
        raise BinError(f"cannot parse interval {text!r} for bin {label!r}") from exc


def _overlap(a: Bin, b: Bin) -> bool:
    """Whether ``a`` (with a.lower <= b.lower) and ``b`` share a point."""
    if a.upper > b.lower:
        return True
    return a.upper == b.lower and a.upper_inclusive and b.lower_inclusive


@dataclass(frozen=True)
class BinSpec:
    biomarker: str
    bins: tuple[Bin, ...]

    def __post_init__(self):
        if self.biomarker not in KINDS:
            raise BinError(f"unknown biomarker kind {self.biomarker!r}; expected one of {KINDS}")
        if not self.bins:
            raise BinError("a bin spec needs at least one bin")
        labels = [b.label for b in self.bins]
        if len(set(labels)) != len(labels) or UNBINNED in labels:
            raise BinError(f"bin labels must be unique and not {UNBINNED!r}: {labels}")
        lowers = [b.lower for b in self.bins]
        if lowers != sorted(lowers) and lowers != sorted(lowers, reverse=True):
            raise BinError(f"bins of {self.biomarker} are not listed in order")
        ordered = sorted(self.bins, key=lambda b: (b.lower, not b.lower_inclusive))
        for a, b in zip(ordered, ordered[1:]):
            if _overlap(a, b):
                raise BinError(f"bins {a.label} {a.interval} and {b.label} {b.interval} overlap")

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.bins]


def assign_bin(value: float, spec: BinSpec) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return UNBINNED
    for b in spec.bins:
        if b.contains(value):
            return b.label
    return UNBINNED


_DEFAULTS = {
    "MMSE_delta": (("Low", "[-6,2]"), ("Minor", "[-12,-7]"), ("Moderate", "[-18,-13]"), ("Severe", "[-27,-19]")),
    "CDR_delta": (("Low", "[0,0.5]"), ("Minor", "(0.5,1.5]"), ("Moderate", "(1.5,2.5]"), ("Severe", "(2.5,3]")),
    "HDR_last": (("NoDepression", "[0,7]"), ("Mild", "[8,16]"), ("Moderate", "[17,23]")),
}


def default_bins(kind: str) -> BinSpec:
    if kind not in _DEFAULTS:
        raise BinError(f"unknown biomarker kind {kind!r}; expected one of {KINDS}")
    return BinSpec(kind, tuple(parse_interval(label, iv) for label, iv in _DEFAULTS[kind]))


def bins_from_config(kind: str, table: Mapping[str, Any] | Sequence) -> BinSpec:
    """Bin spec from a config table ``{label = "[lo,hi]"}`` or a list of ``[label, interval]`` entries."""
    items = table.items() if isinstance(table, Mapping) else table
    bins = []
    for entry in items:
        label, iv = entry
        bins.append(parse_interval(str(label), str(iv)))
    return BinSpec(kind, tuple(bins))


def bin_specs(overrides: Mapping[str, Any] | None = None) -> dict[str, BinSpec]:
    """Default specs for every kind, replaced by any ``overrides[kind]`` table."""
    overrides = overrides or {}
    unknown = set(overrides) - set(KINDS)
    if unknown:
        raise BinError(f"unknown biomarker kinds in bins config: {sorted(unknown)}")
    return {k: bins_from_config(k, overrides[k]) if k in overrides else default_bins(k) for k in KINDS}


# --------------------------------------------------------------------------
# association

def biomarker_value(series: MarkerSeries, kind: str) -> float | None:
    """Last-minus-first visit change (MMSE, CDR) or the last available record (HDR); None if missing."""
    if not series.sessions:
        return None
    first, last = series.sessions[0], series.sessions[-1]
    if kind == "MMSE_delta":
        if first.mmse is None or last.mmse is None:
            return None
        return float(last.mmse - first.mmse)
    if kind == "CDR_delta":
        if first.cdr is None or last.cdr is None:
            return None
        return float(last.cdr - first.cdr)
    if kind == "HDR_last":
        recorded = [s.hdr for s in series.sessions if s.hdr is not None]
        return float(recorded[-1]) if recorded else None
    raise BinError(f"unknown biomarker kind {kind!r}")


@dataclass
class AssociationRow:
    label: str
    interval: str
    n_subjects: int
    delta_coherence: Description | None
    subjects: tuple[str, ...] = ()


@dataclass
class AssociationTable:
    spec: BinSpec
    rows: list[AssociationRow]
    unbinned: list[str]
    missing: list[str]
    tests: list[tuple[str, str, TestResult]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.n_subjects for r in self.rows) + len(self.unbinned) + len(self.missing)

    def row(self, label: str) -> AssociationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def association_table(
    series: Sequence[MarkerSeries],
    spec: BinSpec,
    marker_deltas: Mapping[str, float] | None = None,
    ddof: int = 1,
    alternative: str = "two-sided",
) -> AssociationTable:
    """Per bin: count and mean (std) coherence change; Mann-Whitney between every pair of non-empty bins."""
    groups: dict[str, list[tuple[str, float]]] = {label: [] for label in spec.labels}
    unbinned, missing = [], []
    for s in series:
        value = biomarker_value(s, spec.biomarker)
        if value is None:
            missing.append(s.subject_id)
            continue
        label = assign_bin(value, spec)
        if label == UNBINNED:
            unbinned.append(s.subject_id)
            continue
        d = marker_deltas[s.subject_id] if marker_deltas is not None else delta_end_start(s)
        groups[label].append((s.subject_id, d))
    rows = []
    for b in spec.bins:
        members = groups[b.label]
        desc = describe([d for _, d in members], ddof) if members else None
        rows.append(AssociationRow(b.label, b.interval, len(members), desc, tuple(sid for sid, _ in members)))
    tests = []
    for a, b in itertools.combinations(rows, 2):
        if a.n_subjects and b.n_subjects:
            da = [d for _, d in groups[a.label]]
            db = [d for _, d in groups[b.label]]
            tests.append((a.label, b.label, mann_whitney(da, db, alternative=alternative)))
    return AssociationTable(spec, rows, sorted(unbinned), sorted(missing), tests)


def write_association_tsv(tables: Sequence[AssociationTable], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["biomarker", "bin", "interval", "n_subjects", "delta_coherence"])
        for t in tables:
            for r in t.rows:
                stats = "-" if r.delta_coherence is None else r.delta_coherence.fmt(3)
                w.writerow([t.spec.biomarker, r.label, r.interval, r.n_subjects, stats])
            w.writerow([t.spec.biomarker, UNBINNED, "-", len(t.unbinned), "-"])
            w.writerow([t.spec.biomarker, "missing", "-", len(t.missing), "-"])
        w.writerow([])
        w.writerow(["biomarker", "bin_a", "bin_b", "U", "p_value", "significant"])
        for t in tables:
            for a, b, res in t.tests:
                w.writerow([t.spec.biomarker, a, b, f"{res.statistic:.1f}", f"{res.p_value:.3g}",
                            "yes" if res.p_value < ALPHA else "no"])


def write_insufficient_stub(path: str | Path, reason: str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["status", "reason"])
        w.writerow(["insufficient data", reason])
