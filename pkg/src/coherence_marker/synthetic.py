"""Templated picture-description narratives with a planted event order.

A healthy narrative walks through a contiguous window of a fixed event script,
one utterance per event, so the only coherent continuation of event ``e`` is
event ``e + 1``. Impaired narratives additionally contain off-script
digressions (coded ``[+ exc]``) and skipped events, at a rate that grows with
a per-subject severity. Biomarkers are drawn to track that severity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import Corpus, Diagnosis, parse_transcript

SCRIPT: tuple[tuple[str, ...], ...] = (
    ("the mother stands at the kitchen window", "a woman is standing by the window", "mom is at the window looking out"),
    ("she is drying a plate with a towel", "the lady wipes the dish with a cloth", "she dries the plate"),
    ("the faucet is running", "the tap was left on", "water keeps running from the spigot"),
    ("the sink is overflowing", "water spills over the basin", "the sink overflows onto the floor"),
    ("there is a puddle on the floor", "the floor is getting wet", "a pool of water spreads across the tiles"),
    ("her shoes are standing in the puddle", "her feet are in the water", "she steps in the puddle with her shoes"),
    ("behind her a boy is climbing", "the little boy climbs up", "a young lad is clambering"),
    ("he is on a stool", "the boy stands on the stool", "he balances on a three legged stool"),
    ("the stool is tipping over", "the stool wobbles and tilts", "that stool is about to fall"),
    ("he reaches into the cupboard", "the boy reaches up to the cabinet", "he stretches toward the top shelf"),
    ("he takes a cookie from the jar", "the lad grabs cookies out of the cookie jar", "he is stealing a cookie"),
    ("his sister waits beside him", "a girl stands next to the boy", "the little girl is beside him"),
    ("she holds out her hand", "the girl reaches her hand up", "her hand is outstretched"),
    ("she wants a cookie too", "the girl asks for one", "she is hoping to get a cookie"),
    ("she puts a finger to her lips", "the girl says shush", "she tells him to be quiet"),
)

DIGRESSIONS: tuple[str, ...] = (
    "my daughter had curtains like those",
    "i used to bake every sunday",
    "we lived on a farm back then",
    "my husband never washed anything",
    "i do not know what year it is",
    "that reminds me of my old school",
    "my glasses are at home somewhere",
    "the doctor told me to walk more",
    "we went to the seaside last summer",
    "my brother worked at the mill",
    "i like the color of that dress",
    "they sold the house years ago",
)


@dataclass
class SyntheticSession:
    visit_index: int
    utterances: list[tuple[str, bool]]  # (text, disruptive)
    mmse: int | None = None
    cdr: float | None = None
    hdr: int | None = None


@dataclass
class SyntheticSubject:
    subject_id: str
    diagnosis: Diagnosis
    severity: float
    sessions: list[SyntheticSession] = field(default_factory=list)


def make_narrative(
    rng: np.random.Generator,
    length_range: tuple[int, int] = (5, 9),
    digression_rate: float = 0.0,
    skip_rate: float = 0.0,
) -> list[tuple[str, bool]]:
    """One narrative as ``(utterance text, disruptive)`` tuples."""
    lo, hi = length_range
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, len(SCRIPT) - length + 1))
    out: list[tuple[str, bool]] = []
    event = start
    end = start + length
    while event < end:
        if out and rng.random() < digression_rate:
            out.append((str(rng.choice(DIGRESSIONS)), True))
        templates = SCRIPT[event]
        out.append((templates[int(rng.integers(len(templates)))], False))
        event += 2 if rng.random() < skip_rate else 1
    return out


def to_chat(subject_id: str, visit_index: int, diagnosis: Diagnosis, utterances, mmse=None, cdr=None, hdr=None) -> str:
    fields = [f"subject={subject_id}", f"visit={visit_index}", f"dx={diagnosis.value}"]
    for key, val in (("mmse", mmse), ("cdr", cdr), ("hdr", hdr)):
        if val is not None:
            fields.append(f"{key}={val}")
    lines = ["@UTF8", "@Begin", "@Participants:\tPAR Participant, INV Investigator", "@ID:\t" + "; ".join(fields)]
    lines.append("*INV:\ttell me everything you see going on in that picture .")
    for text, disruptive in utterances:
        lines.append(f"*PAR:\t{text} .{' [+ exc]' if disruptive else ''}")
    lines.append("@End")
    return "\n".join(lines) + "\n"


_RATES = {
    # diagnosis: (base digression rate, growth per visit at severity 1, skip rate)
    Diagnosis.HEALTHY: (0.03, -0.01, 0.0),
    Diagnosis.MCI: (0.15, 0.08, 0.05),
    Diagnosis.AD: (0.25, 0.12, 0.1),
}


def _biomarkers(rng, dx: Diagnosis, severity: float, n_visits: int):
    if dx is Diagnosis.HEALTHY:
        mmse = [int(rng.integers(28, 31)) for _ in range(n_visits)]
        return mmse, [0.0] * n_visits, [int(rng.integers(0, 6)) for _ in range(n_visits)]
    start_mmse = int(rng.integers(27, 31))
    delta = int(np.clip(round(2 - severity * 29 + rng.normal(0, 1.0)), -start_mmse, 30 - start_mmse))
    cdr_last = float(np.clip(np.round(severity * 3.0 * 2) / 2, 0.0, 3.0))
    hdr_last = int(np.clip(round(severity * 22 + rng.normal(0, 1.5)), 0, 23))
    frac = np.linspace(0.0, 1.0, n_visits)
    mmse = [int(round(start_mmse + f * delta)) for f in frac]
    cdr = [float(np.round(f * cdr_last * 2) / 2) for f in frac]
    hdr = [int(round(f * hdr_last)) if i else None for i, f in enumerate(frac)]
    hdr[-1] = hdr_last
    return mmse, cdr, hdr


def generate_subjects(
    n_healthy: int = 20,
    n_mci: int = 14,
    n_ad: int = 40,
    seed: int = 0,
    visits_range: tuple[int, int] = (2, 4),
) -> list[SyntheticSubject]:
    rng = np.random.default_rng(seed)
    subjects = []
    plan = [(Diagnosis.HEALTHY, n_healthy), (Diagnosis.MCI, n_mci), (Diagnosis.AD, n_ad)]
    counter = 0
    for dx, count in plan:
        for _ in range(count):
            counter += 1
            severity = 0.0 if dx is Diagnosis.HEALTHY else float(rng.uniform(0.0, 1.0))
            if dx is Diagnosis.MCI:
                severity *= 0.5
            n_visits = int(rng.integers(visits_range[0], visits_range[1] + 1))
            mmse, cdr, hdr = _biomarkers(rng, dx, severity, n_visits)
            base, growth, skip = _RATES[dx]
            subj = SyntheticSubject(f"{counter:03d}", dx, severity)
            for v in range(n_visits):
                scale = severity if dx is not Diagnosis.HEALTHY else 1.0
                rate = float(np.clip(base + growth * scale * v, 0.0, 0.9))
                utts = make_narrative(rng, digression_rate=rate, skip_rate=skip * scale)
                subj.sessions.append(SyntheticSession(v + 1, utts, mmse[v], cdr[v], hdr[v]))
            subjects.append(subj)
    return subjects


def healthy_subjects(n_narratives: int = 200, seed: int = 0, visits_range: tuple[int, int] = (1, 3)) -> list[SyntheticSubject]:
    """Healthy-only subjects whose narratives total exactly ``n_narratives``."""
    rng = np.random.default_rng(seed)
    subjects: list[SyntheticSubject] = []
    remaining = n_narratives
    while remaining > 0:
        n_visits = min(remaining, int(rng.integers(visits_range[0], visits_range[1] + 1)))
        subj = SyntheticSubject(f"h{len(subjects) + 1:03d}", Diagnosis.HEALTHY, 0.0)
        for v in range(n_visits):
            subj.sessions.append(SyntheticSession(v + 1, make_narrative(rng), mmse=29, cdr=0.0, hdr=2))
        subjects.append(subj)
        remaining -= n_visits
    return subjects


def chat_files(subjects: list[SyntheticSubject]) -> dict[str, str]:
    """File name to CHAT transcript text."""
    out = {}
    for subj in subjects:
        for s in subj.sessions:
            name = f"{subj.subject_id}-{s.visit_index}.cha"
            out[name] = to_chat(subj.subject_id, s.visit_index, subj.diagnosis, s.utterances, s.mmse, s.cdr, s.hdr)
    return out


def to_corpus(subjects: list[SyntheticSubject]) -> Corpus:
    return Corpus([parse_transcript(text, source=name) for name, text in sorted(chat_files(subjects).items())])


def write_corpus(subjects: list[SyntheticSubject], directory: str | Path, metadata: bool = True) -> Path:
    """Write ``.cha`` files (and a ``metadata.csv`` table) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in chat_files(subjects).items():
        (directory / name).write_text(text, encoding="utf-8")
    if metadata:
        rows = ["subject_id,visit_index,diagnosis,mmse,cdr,hdr"]
        for subj in subjects:
            for s in subj.sessions:
                cells = [subj.subject_id, str(s.visit_index), subj.diagnosis.value]
                cells += ["" if v is None else str(v) for v in (s.mmse, s.cdr, s.hdr)]
                rows.append(",".join(cells))
        (directory / "metadata.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return directory
