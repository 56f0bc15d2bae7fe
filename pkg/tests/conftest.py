import pytest

from coherence_marker.ingest import Corpus, Diagnosis, Narrative, SessionMeta, Utterance


def make_narrative(k, subject="s1", visit=1, dx=Diagnosis.HEALTHY, disruptive=(), **bio):
    utts = tuple(Utterance(i, "PAR", f"utterance number {i}", i in disruptive, f"*PAR:\tutterance number {i} .") for i in range(k))
    return Narrative(SessionMeta(subject, visit, dx, **bio), utts)


@pytest.fixture
def narrative_factory():
    return make_narrative


@pytest.fixture
def ten_subject_corpus():
    return Corpus([make_narrative(4, subject=f"{i:02d}", visit=v) for i in range(10) for v in (1, 2)])


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
