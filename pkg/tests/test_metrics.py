import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coherence_marker.metrics import (
    MetricsError,
    ScoredPair,
    average_rows,
    entire_accuracy,
    metrics_report,
    metrics_row,
    pct_delta,
    pct_delta_per_anchor,
    score_pairs,
    temporal_accuracy,
    write_metrics_tsv,
    write_summary_json,
)
from coherence_marker.models.backends import UniformLM
from coherence_marker.models.scorers import GenerativeScorer
from coherence_marker.pairs import Label, UtterancePair, enumerate_pairs
from conftest import make_narrative

C, I = Label.COHERENT, Label.INCOHERENT


def sp(ref, a, b, score):
    return ScoredPair(UtterancePair(ref, a, b, C if b - a == 1 else I), float(score))


def scored_dataset(k_list, scores):
    """Every pair of narratives of the given lengths, scored from ``scores`` in order."""
    out, it = [], iter(scores)
    for n, k in enumerate(k_list):
        pos, neg = enumerate_pairs(make_narrative(k, subject=f"s{n}"))
        out.extend(ScoredPair(p, next(it)) for p in pos + neg)
    return out


def n_pairs(k_list):
    return sum((k - 1) + (k - 1) * (k - 2) // 2 for k in k_list)


finite = st.floats(-100, 100, allow_nan=False)


@st.composite
def datasets(draw):
    ks = draw(st.lists(st.integers(3, 6), min_size=1, max_size=4))
    scores = draw(st.lists(finite, min_size=n_pairs(ks), max_size=n_pairs(ks)))
    return scored_dataset(ks, scores)


# ---------------------------------------------------------------- pct_delta

@pytest.mark.parametrize("a,b,expect", [(0.64, 0.41, 44), (0.26, 0.19, 31)])
def test_pct_delta_reference_values(a, b, expect):
    assert abs(pct_delta(a, b) - expect) <= 1


def test_pct_delta_exact_and_errors():
    assert pct_delta(0.64, 0.41) == pytest.approx(0.23 / 0.525 * 100)
    assert pct_delta(0.3, 0.3) == 0.0
    with pytest.raises(MetricsError):
        pct_delta(1.0, -1.0)


@given(finite, finite, st.floats(1e-3, 1e3))
def test_pct_delta_symmetry_and_scale(a, b, c):
    if a + b == 0 or abs(a + b) < 1e-6:
        return
    assert pct_delta(a, b) == pytest.approx(pct_delta(b, a))
    assert pct_delta(a * c, b * c) == pytest.approx(pct_delta(a, b), rel=1e-9)


# ---------------------------------------------------------------- accuracies

def test_dominance_gives_full_accuracy():
    data = scored_dataset([5], [1.0] * 4 + [0.0] * 6)
    assert temporal_accuracy(data, "mean_counterpart").value == 1.0
    assert temporal_accuracy(data, "all_counterparts").value == 1.0


def test_anchor_between_counterparts():
    data = [sp("n", 0, 1, 0.5), sp("n", 0, 2, 0.4), sp("n", 0, 3, 0.7)]
    assert temporal_accuracy(data, "mean_counterpart").correct == 0
    assert temporal_accuracy(data, "all_counterparts").correct == 0


def test_temporal_excludes_anchor_without_counterpart():
    # the last adjacent pair of a narrative has no forward non-adjacent partner
    data = scored_dataset([4], [1, 1, 1, 0, 0, 0])
    res = temporal_accuracy(data)
    assert res.total == 2 and res.excluded == 1


def test_temporal_errors():
    with pytest.raises(MetricsError):
        temporal_accuracy([])
    with pytest.raises(MetricsError):
        temporal_accuracy([sp("n", 0, 1, 1.0)])
    with pytest.raises(MetricsError):
        temporal_accuracy([sp("n", 0, 1, 1.0), sp("n", 0, 2, 0.0)], "median")


def test_entire_accuracy_example():
    data = [sp("n", 0, 1, 0.6), sp("n", 1, 2, 0.7), sp("n", 0, 2, 0.3), sp("n", 0, 3, 0.9)]
    assert entire_accuracy(data).value == 1.0


def test_entire_accuracy_ties_lose_and_exclusion():
    data = scored_dataset([4], [0.5] * 6) + [sp("short", 0, 1, 1.0)]
    res = entire_accuracy(data)
    assert res.value == 0.0 and res.excluded == 1


@settings(max_examples=60)
@given(datasets())
def test_all_mode_never_exceeds_mean_mode(data):
    assert temporal_accuracy(data, "all_counterparts").value <= temporal_accuracy(data, "mean_counterpart").value


@settings(max_examples=60)
@given(datasets(), st.integers(-50, 50))
def test_accuracies_shift_invariant(data, shift):
    # integer data and shift keep the comparisons exact in floating point
    data = [ScoredPair(d.pair, float(round(d.score))) for d in data]
    shifted = [ScoredPair(d.pair, d.score + shift) for d in data]
    for mode in ("mean_counterpart", "all_counterparts"):
        assert temporal_accuracy(data, mode) == temporal_accuracy(shifted, mode)
    assert entire_accuracy(data) == entire_accuracy(shifted)


@settings(max_examples=60)
@given(datasets())
def test_accuracies_in_unit_interval(data):
    for v in (temporal_accuracy(data).value, entire_accuracy(data).value):
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- report

def test_two_scorer_report_recomputed():
    rng = np.random.default_rng(0)
    a = scored_dataset([5, 6], rng.normal(1, 1, size=n_pairs([5, 6])))
    b = scored_dataset([5, 6], rng.normal(0, 1, size=n_pairs([5, 6])))
    rows = metrics_report({"b": b, "a": a}, {"a": 0.25})
    assert [r.scorer for r in rows] == ["a", "b"]
    for row, data in zip(rows, (a, b)):
        pos = [d.score for d in data if d.pair.label is C]
        neg = [d.score for d in data if d.pair.label is I]
        assert row.avg_f_pos == pytest.approx(sum(pos) / len(pos))
        assert row.avg_f_neg == pytest.approx(sum(neg) / len(neg))
        assert row.pct_delta == pytest.approx(abs(row.avg_f_pos - row.avg_f_neg) / abs(row.avg_f_pos + row.avg_f_neg) * 200)
        assert row.acc_temp == temporal_accuracy(data).value
        assert row.acc_entire == entire_accuracy(data).value
        assert row.n_pos == len(pos) and row.n_neg == len(neg)
    assert rows[0].avg_loss == 0.25 and rows[1].avg_loss is None


def test_identical_distributions_not_significant():
    data = scored_dataset([6], [1.0, 2.0, 3.0, 4.0, 5.0] + [1.0, 2.0, 3.0, 4.0, 5.0] * 2)
    assert not metrics_row("x", data).significant


def test_per_anchor_pct_delta():
    data = [sp("n", 0, 1, 0.6), sp("n", 0, 2, 0.2), sp("n", 0, 3, 0.4), sp("n", 1, 2, 0.5), sp("n", 1, 3, 0.5)]
    assert pct_delta_per_anchor(data) == pytest.approx((pct_delta(0.6, 0.3) + 0.0) / 2)


def test_generative_loss_rendered_null(tmp_path):
    nars = [make_narrative(5, subject=f"s{i}") for i in range(3)]
    data = score_pairs(GenerativeScorer(UniformLM(16)), nars, "uniform")
    assert all(d.score == pytest.approx(-15) for d in data)
    row = metrics_row("uniform", data)
    write_metrics_tsv([row], tmp_path / "m.tsv")
    header, line = (tmp_path / "m.tsv").read_text().splitlines()
    cells = dict(zip(header.split("\t"), line.split("\t")))
    assert cells["avg_loss"] == "-"
    assert cells["avg_f_pos"] == "-15.000"
    assert cells["pct_delta"] == "0.0"
    write_summary_json([row], tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["uniform"]["avg_loss"] is None


def test_tsv_rounding(tmp_path):
    data = scored_dataset([4], [0.61234, 0.6, 0.6, 0.41, 0.41, 0.41])
    write_metrics_tsv([metrics_row("x", data)], tmp_path / "m.tsv")
    cells = dict(zip(*(l.split("\t") for l in (tmp_path / "m.tsv").read_text().splitlines())))
    assert cells["avg_f_pos"] == "0.604" and cells["acc_temp"] == "100.0" and cells["pct_delta"] == "38.3"


def test_average_rows():
    rng = np.random.default_rng(1)
    rows = [metrics_row(f"r{i}", scored_dataset([5], rng.normal(size=10))) for i in range(3)]
    avg = average_rows(rows, "mean")
    assert avg.runs == 3 and avg.scorer == "mean"
    assert avg.acc_temp == pytest.approx(np.mean([r.acc_temp for r in rows]))
    assert avg.significant == all(r.significant for r in rows)
    with pytest.raises(MetricsError):
        average_rows([])


def test_nan_pct_delta_when_means_cancel():
    data = scored_dataset([3], [1.0, 1.0, -1.0])
    assert math.isnan(metrics_row("x", data).pct_delta)
