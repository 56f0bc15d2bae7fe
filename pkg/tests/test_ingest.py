import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coherence_marker.ingest import (
    ConfigurationError,
    Corpus,
    Diagnosis,
    IngestError,
    ParseError,
    corpus_from_dict,
    corpus_to_dict,
    load_cohort,
    normalize_text,
    parse_transcript,
)

THREE_LINES = "*PAR: the boy is on the stool .\n*INV: mhm .\n*PAR: it is tipping over . [+ exc]\n"


def test_three_line_fixture():
    nar = parse_transcript(THREE_LINES)
    assert [u.text for u in nar.utterances] == ["the boy is on the stool", "it is tipping over"]
    assert [u.disruptive for u in nar.utterances] == [False, True]
    assert [u.index for u in nar.utterances] == [0, 1]


def test_empty_stream():
    with pytest.raises(ParseError, match="no utterances"):
        parse_transcript("")


def test_key_value_id_header():
    nar = parse_transcript("@ID: subject=017; visit=2; dx=AD; mmse=21\n*PAR: hello there .\n")
    m = nar.meta
    assert (m.subject_id, m.visit_index, m.diagnosis, m.mmse) == ("017", 2, Diagnosis.AD, 21)


def test_pipe_form_id_header():
    text = (
        "@ID:\teng|Pitt|PAR|57;|female|ProbableAD||Participant||18|\n"
        "@ID:\teng|Pitt|INV|||||Investigator|||\n"
        "*PAR:\tthe kid is reaching .\n"
    )
    nar = parse_transcript(text, defaults={"subject_id": "001", "visit_index": 1})
    assert nar.meta.diagnosis is Diagnosis.AD and nar.meta.mmse == 18


def test_malformed_header_names_line():
    with pytest.raises(ParseError) as err:
        parse_transcript("*PAR: ok then .\n@ID: subject=1; visit=zero\n")
    assert err.value.line_no == 2
    assert "line 2" in str(err.value)


def test_unknown_dialect():
    with pytest.raises(ConfigurationError):
        parse_transcript(THREE_LINES, dialect="elan")


def test_unknown_lines_are_ignored_with_warning(caplog):
    nar = parse_transcript("this is not chat\n*PAR: the sink overflows .\n")
    assert len(nar) == 1
    assert any("ignoring line" in r.message for r in caplog.records)


def test_continuation_and_dependent_tiers():
    text = "*PAR:\tthe water is\n\trunning over .\n%mor:\tdet|the n|water\n*PAR:\tshe is drying .\n"
    nar = parse_transcript(text)
    assert nar.texts() == ["the water is running over", "she is drying"]


def test_speaker_selection():
    nar = parse_transcript(THREE_LINES, speakers={"PAR", "INV"})
    assert [u.speaker for u in nar.utterances] == ["PAR", "INV", "PAR"]


def test_empty_normalized_lines_are_dropped():
    nar = parse_transcript("*PAR: xxx .\n*PAR: a boy .\n")
    assert nar.texts() == ["a boy"] and nar.utterances[0].index == 0
    assert nar.dropped == ("*PAR: xxx .",)


@pytest.mark.parametrize(
    "raw, tokens, codes",
    [
        ("&uh the WATER [/] water is overflowing .", ["the", "water", "is", "overflowing"], {"/"}),
        ("xxx .", [], set()),
        ("she's drying dishes [+ exc]", ["she's", "drying", "dishes"], {"exc"}),
        ("<the boy> [//] the girl (.) wants +...", ["the", "girl", "wants"], {"//"}),
        ("cookie@o jar [: jars] 0is &-um falling ?", ["cookie", "jar", "falling"], {": jars"}),
    ],
)
def test_normalize_examples(raw, tokens, codes):
    got, seen = normalize_text(raw)
    assert got == tokens
    assert codes <= seen


chat_bits = st.sampled_from(
    ["the", "WATER", "[/]", "[+ exc]", "&uh", "xxx", ".", "?", "<a", "b>", "[//]", "(.)", "+...", "she's",
     "0is", "cookie@o", "[: jars]", "(", ")", "]", "[", "--", "x'y", "a-b"]
)


@settings(max_examples=200, deadline=None)
@given(st.lists(chat_bits, max_size=12))
def test_normalize_idempotent(bits):
    first, _ = normalize_text(" ".join(bits))
    again, _ = normalize_text(" ".join(first))
    assert again == first
    assert all(t and t == t.lower() for t in first)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["PAR", "INV"]), st.booleans(), st.sampled_from(["the boy", "a cookie jar", "water runs"])), min_size=1, max_size=8))
def test_raw_round_trip_and_flag_fidelity(lines):
    if not any(spk == "PAR" for spk, _, _ in lines):
        return
    src = [f"*{spk}:\t{text} .{' [+ exc]' if exc else ''}" for spk, exc, text in lines]
    nar = parse_transcript("\n".join(src) + "\n")
    par = [line for line in src if line.startswith("*PAR")]
    assert [u.raw for u in nar.utterances] == par
    assert sum(u.disruptive for u in nar.utterances) == sum("[+ exc]" in line for line in par)


def _write(path, subject, visit, dx="healthy"):
    path.write_text(f"@ID: subject={subject}; visit={visit}; dx={dx}\n*PAR: the boy climbs .\n*PAR: he falls .\n")


def test_load_cohort_counts(tmp_path):
    _write(tmp_path / "a.cha", "1", 1)
    _write(tmp_path / "b.cha", "1", 2)
    _write(tmp_path / "c.cha", "2", 1)
    corpus = load_cohort(tmp_path)
    assert len(corpus) == 3 and len(corpus.by_subject()) == 2


def test_load_cohort_duplicate_lists_both_files(tmp_path):
    _write(tmp_path / "a.cha", "017", 1)
    _write(tmp_path / "b.cha", "017", 1)
    with pytest.raises(IngestError) as err:
        load_cohort(tmp_path)
    assert "a.cha" in str(err.value) and "b.cha" in str(err.value)


def test_pitt_file_names(tmp_path):
    (tmp_path / "005-2.cha").write_text("*PAR: the mother dries .\n")
    nar = load_cohort(tmp_path).narratives[0]
    assert nar.meta.subject_id == "005" and nar.meta.visit_index == 3


def test_metadata_table_overrides_header(tmp_path):
    _write(tmp_path / "a.cha", "9", 1, dx="healthy")
    meta = tmp_path / "meta.tsv"
    meta.write_text("subject_id\tvisit_index\tdiagnosis\tmmse\tcdr\thdr\n9\t1\tAD\t20\t\t3\n")
    m = load_cohort(tmp_path, meta).narratives[0].meta
    assert m.diagnosis is Diagnosis.AD and m.mmse == 20 and m.cdr is None and m.hdr == 3


def test_unreadable_file_names_path(tmp_path):
    (tmp_path / "bad.cha").write_bytes(b"*PAR: \xff\xfe broken\n")
    with pytest.raises(IngestError, match="bad.cha"):
        load_cohort(tmp_path)


def test_corpus_json_round_trip(tmp_path):
    _write(tmp_path / "a.cha", "1", 1)
    (tmp_path / "b.cha").write_text("@ID: subject=2; visit=1; dx=AD; mmse=20; cdr=1.5\n*PAR: x . [+ exc]\n*PAR: y .\n")
    corpus = load_cohort(tmp_path)
    assert corpus_from_dict(corpus_to_dict(corpus)) == corpus


def test_meta_ranges():
    with pytest.raises(ParseError):
        parse_transcript("@ID: subject=1; mmse=31\n*PAR: hi .\n")
