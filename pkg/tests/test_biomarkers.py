import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coherence_marker.biomarkers import (
    UNBINNED,
    Bin,
    BinError,
    BinSpec,
    assign_bin,
    association_table,
    bin_specs,
    biomarker_value,
    default_bins,
    parse_interval,
    write_association_tsv,
    write_insufficient_stub,
)
from coherence_marker.ingest import Diagnosis, SessionMeta
from coherence_marker.marker import MarkerSeries

AD = Diagnosis.AD

# independent restatement of the default tables: (label, lo, hi, lo_closed, hi_closed)
ORACLE = {
    "MMSE_delta": [("Low", -6, 2, 1, 1), ("Minor", -12, -7, 1, 1), ("Moderate", -18, -13, 1, 1), ("Severe", -27, -19, 1, 1)],
    "CDR_delta": [("Low", 0, 0.5, 1, 1), ("Minor", 0.5, 1.5, 0, 1), ("Moderate", 1.5, 2.5, 0, 1), ("Severe", 2.5, 3, 0, 1)],
    "HDR_last": [("NoDepression", 0, 7, 1, 1), ("Mild", 8, 16, 1, 1), ("Moderate", 17, 23, 1, 1)],
}


def oracle_bin(kind, x):
    hits = [lab for lab, lo, hi, lc, hc in ORACLE[kind] if (x >= lo if lc else x > lo) and (x <= hi if hc else x < hi)]
    assert len(hits) <= 1
    return hits[0] if hits else UNBINNED


def subject(sid, mmse, cdr=(0.0, 0.0), hdr=(None, None), markers=(0.5, 0.5)):
    sessions = tuple(SessionMeta(sid, v + 1, AD, mmse[v], cdr[v], hdr[v]) for v in range(2))
    return MarkerSeries(sid, AD, tuple((v + 1, markers[v]) for v in range(2)), sessions)


@pytest.mark.parametrize(
    "kind,value,label",
    [
        ("MMSE_delta", -6, "Low"), ("MMSE_delta", -7, "Minor"), ("MMSE_delta", -13, "Moderate"),
        ("MMSE_delta", -19, "Severe"), ("MMSE_delta", -15, "Moderate"), ("MMSE_delta", 5, UNBINNED),
        ("MMSE_delta", 3, UNBINNED), ("CDR_delta", 0.5, "Low"), ("CDR_delta", 1.5, "Minor"),
        ("CDR_delta", 0.75, "Minor"), ("HDR_last", 7, "NoDepression"), ("HDR_last", 17, "Moderate"),
        ("HDR_last", 7.5, UNBINNED),
    ],
)
def test_boundaries(kind, value, label):
    assert assign_bin(value, default_bins(kind)) == label


@pytest.mark.parametrize("kind", list(ORACLE))
def test_exhaustive_sweep(kind):
    spec = default_bins(kind)
    for x in np.arange(-40, 40.25, 0.25):
        assert assign_bin(float(x), spec) == oracle_bin(kind, float(x)), x


@given(st.floats(allow_nan=False, allow_infinity=True))
def test_assign_bin_total(x):
    for kind in ORACLE:
        label = assign_bin(x, default_bins(kind))
        assert label == oracle_bin(kind, x)
        assert label == assign_bin(x, default_bins(kind))
    assert assign_bin(float("nan"), default_bins("HDR_last")) == UNBINNED


def test_default_spec_shapes():
    mmse, hdr = default_bins("MMSE_delta"), default_bins("HDR_last")
    assert len(mmse.bins) == 4 and mmse.bins[-1].lower == -27
    assert len(hdr.bins) == 3 and hdr.bins[-1].upper == 23
    assert default_bins("CDR_delta").bins[1].interval == "(0.5,1.5]"
    with pytest.raises(BinError):
        default_bins("BMI")


def test_parse_interval():
    b = parse_interval("x", "(−1.5, 2]")
    assert (b.lower, b.upper, b.lower_inclusive, b.upper_inclusive) == (-1.5, 2.0, False, True)
    for bad in ("[1,2", "1,2", "[a,2]"):
        with pytest.raises(BinError):
            parse_interval("x", bad)
    with pytest.raises(BinError):
        parse_interval("x", "(1,1]")


def test_spec_validation():
    with pytest.raises(BinError):
        BinSpec("MMSE_delta", (Bin("a", 0, 2), Bin("b", 2, 4)))
    with pytest.raises(BinError):
        BinSpec("MMSE_delta", (Bin("a", 0, 2), Bin("a", 3, 4)))
    with pytest.raises(BinError):
        BinSpec("MMSE_delta", (Bin("a", 0, 2), Bin("b", 5, 6), Bin("c", 3, 4)))
    BinSpec("MMSE_delta", (Bin("a", 0, 2, upper_inclusive=False), Bin("b", 2, 4)))


def test_config_override():
    specs = bin_specs({"HDR_last": {"None": "[0,10]", "Some": "(10,30]"}})
    assert specs["HDR_last"].labels == ["None", "Some"]
    assert assign_bin(10, specs["HDR_last"]) == "None"
    assert specs["MMSE_delta"] == default_bins("MMSE_delta")
    with pytest.raises(BinError):
        bin_specs({"BMI": {}})


def test_biomarker_values():
    s = subject("a", (28, 20), (0.5, 1.5), (None, 12))
    assert biomarker_value(s, "MMSE_delta") == -8
    assert biomarker_value(s, "CDR_delta") == 1.0
    assert biomarker_value(s, "HDR_last") == 12
    s2 = subject("b", (28, None), hdr=(9, None))
    assert biomarker_value(s2, "MMSE_delta") is None
    assert biomarker_value(s2, "HDR_last") == 9


def test_planted_monotone_trend():
    rng = np.random.default_rng(0)
    series = []
    for i, drop in enumerate(rng.integers(-27, 3, size=80)):
        start = 28
        eff = -0.01 * abs(int(drop)) + rng.normal(0, 0.01)
        series.append(subject(f"s{i}", (start, start + int(drop)), markers=(0.6, 0.6 + eff)))
    table = association_table(series, default_bins("MMSE_delta"))
    means = [r.delta_coherence.mean for r in table.rows]
    assert means == sorted(means, reverse=True)
    assert all(r.n_subjects > 0 for r in table.rows)
    assert any(a == "Low" and b == "Severe" and res.p_value < 0.05 for a, b, res in table.tests)


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30), st.booleans()), min_size=1, max_size=30))
def test_conservation(rows):
    series = [subject(f"s{i}", (a, None if missing else b)) for i, (a, b, missing) in enumerate(rows)]
    table = association_table(series, default_bins("MMSE_delta"))
    assert table.total == len(series)
    members = [sid for r in table.rows for sid in r.subjects] + table.unbinned + table.missing
    assert sorted(members) == sorted(s.subject_id for s in series)
    assert len(table.missing) == sum(m for _, _, m in rows)


def test_relabel_permutes_rows():
    rng = np.random.default_rng(3)
    series = [subject(f"s{i}", (29, 29 - int(d)), markers=(0.5, 0.5 + rng.normal(0, 0.1))) for i, d in enumerate(rng.integers(0, 26, 40))]
    spec = default_bins("MMSE_delta")
    names = ["D", "C", "B", "A"]
    relabelled = BinSpec(spec.biomarker, tuple(Bin(n, b.lower, b.upper, b.lower_inclusive, b.upper_inclusive) for n, b in zip(names, spec.bins)))
    t1 = association_table(series, spec)
    t2 = association_table(series, relabelled)
    for r1, r2, name in zip(t1.rows, t2.rows, names):
        assert r2.label == name and r1.n_subjects == r2.n_subjects and r1.delta_coherence == r2.delta_coherence
    assert [res.p_value for *_, res in t1.tests] == [res.p_value for *_, res in t2.tests]


def test_empty_bin_row_and_export(tmp_path):
    series = [subject("a", (29, 28), markers=(0.5, 0.4)), subject("b", (29, 27))]
    table = association_table(series, default_bins("MMSE_delta"))
    assert table.row("Severe").n_subjects == 0 and table.row("Severe").delta_coherence is None
    assert table.tests == []
    write_association_tsv([table], tmp_path / "a.tsv")
    text = (tmp_path / "a.tsv").read_text()
    assert "MMSE_delta\tSevere\t[-27,-19]\t0\t-" in text
    assert "MMSE_delta\tLow\t[-6,2]\t2\t-0.050 (0.071)" in text
    write_insufficient_stub(tmp_path / "s.tsv", "no biomarkers")
    assert (tmp_path / "s.tsv").read_text().splitlines()[1] == "insufficient data\tno biomarkers"


def test_marker_delta_override():
    series = [subject("a", (29, 28)), subject("b", (29, 27))]
    table = association_table(series, default_bins("MMSE_delta"), {"a": 1.0, "b": 3.0})
    assert table.row("Low").delta_coherence.mean == 2.0
