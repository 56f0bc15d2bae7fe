"""CHAT-subset transcript reader.

Supported dialect (``"chat"``):

* ``@KEY: value`` header lines. ``@ID`` carries session metadata either as
  ``key=value`` pairs separated by ``;`` (``subject``, ``visit``, ``dx``,
  ``mmse``, ``cdr``, ``hdr``) or as the standard pipe-delimited CHAT record
  ``lang|corpus|code|age|sex|group|SES|role|education|custom|``. Other headers
  (``@Begin``, ``@Participants``, ...) are accepted and ignored.
* ``*SPK:`` utterance tiers, followed by a tab or space. Lines starting with a
  tab continue the previous tier.
* ``%xxx:`` dependent tiers are skipped.
* Bracketed codes; ``[+ exc]`` marks a disruptive utterance.

Anything else is ignored with a warning.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

log = logging.getLogger(__name__)

DIALECTS = ("chat",)
DEFAULT_SPEAKERS = frozenset({"PAR"})
EXCLUSION_CODE = "exc"


class IngestError(Exception):
    """Raised for unreadable, malformed or inconsistent transcripts."""


class ParseError(IngestError):
    def __init__(self, message: str, line_no: int | None = None, source: str | None = None):
        self.line_no = line_no
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if line_no is not None:
            where += f"line {line_no}:"
        super().__init__(f"{where} {message}".strip())


class ConfigurationError(IngestError):
    pass


class Diagnosis(str, enum.Enum):
    HEALTHY = "healthy"
    MCI = "MCI"
    AD = "AD"
    OTHER = "other"

    @classmethod
    def parse(cls, value: str) -> "Diagnosis":
        key = value.strip().lower().replace(" ", "").replace("_", "")
        if key in {"healthy", "control", "hc", "controls", "normal"}:
            return cls.HEALTHY
        if key in {"mci", "memory"}:
            return cls.MCI
        if key in {"ad", "probablead", "possiblead", "alzheimer", "alzheimers", "dementia"}:
            return cls.AD
        return cls.OTHER


@dataclass(frozen=True)
class SessionMeta:
    subject_id: str
    visit_index: int
    diagnosis: Diagnosis = Diagnosis.OTHER
    mmse: int | None = None
    cdr: float | None = None
    hdr: int | None = None

    def __post_init__(self):
        if self.visit_index < 1:
            raise ValueError(f"visit_index must be >= 1, got {self.visit_index}")
        if self.mmse is not None and not 0 <= self.mmse <= 30:
            raise ValueError(f"mmse out of range [0, 30]: {self.mmse}")
        if self.cdr is not None and not 0.0 <= self.cdr <= 3.0:
            raise ValueError(f"cdr out of range [0, 3]: {self.cdr}")
        if self.hdr is not None and self.hdr < 0:
            raise ValueError(f"hdr must be >= 0: {self.hdr}")

    @property
    def ref(self) -> str:
        return f"{self.subject_id}/v{self.visit_index}"


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: str
    text: str
    disruptive: bool = False
    raw: str = ""

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True)
class Narrative:
    meta: SessionMeta
    utterances: tuple[Utterance, ...]
    source: str | None = None
    dropped: tuple[str, ...] = ()  # raw subject lines whose normalized text was empty

    @property
    def ref(self) -> str:
        return self.meta.ref

    def __len__(self) -> int:
        return len(self.utterances)

    def texts(self) -> list[str]:
        return [u.text for u in self.utterances]


@dataclass
class Corpus:
    narratives: list[Narrative] = field(default_factory=list)

    def __post_init__(self):
        seen: dict[tuple[str, int], Narrative] = {}
        for nar in self.narratives:
            key = (nar.meta.subject_id, nar.meta.visit_index)
            if key in seen:
                raise IngestError(
                    f"duplicate session subject={key[0]} visit={key[1]}: "
                    f"{seen[key].source} and {nar.source}"
                )
            seen[key] = nar
        self.narratives.sort(key=lambda n: (n.meta.subject_id, n.meta.visit_index))

    def __len__(self) -> int:
        return len(self.narratives)

    def __iter__(self) -> Iterator[Narrative]:
        return iter(self.narratives)

    def by_subject(self) -> dict[str, list[Narrative]]:
        groups: dict[str, list[Narrative]] = {}
        for nar in self.narratives:
            groups.setdefault(nar.meta.subject_id, []).append(nar)
        return groups

    def get(self, ref: str) -> Narrative:
        for nar in self.narratives:
            if nar.ref == ref:
                return nar
        raise KeyError(ref)

    def subset(self, subjects: Iterable[str]) -> "Corpus":
        keep = set(subjects)
        return Corpus([n for n in self.narratives if n.meta.subject_id in keep])

    def filter(self, diagnosis: Diagnosis | str) -> "Corpus":
        dx = Diagnosis(diagnosis) if not isinstance(diagnosis, Diagnosis) else diagnosis
        return Corpus([n for n in self.narratives if n.meta.diagnosis is dx])


# --------------------------------------------------------------------------
# normalization

_BULLET = re.compile(r"\x15[^\x15]*\x15")
_RETRACE = re.compile(r"(?:<[^<>]*>|\S+)\s*\[/{1,3}\]")
_BRACKET = re.compile(r"\[([^\[\]]*)\]")
_ANGLE = re.compile(r"[<>]")
_PAUSE = re.compile(r"\(\.+\)")
_UNINTELLIGIBLE = {"xxx", "yyy", "www", "xx", "yy"}
_EDGE_PUNCT = "\"',.;:!?()“”‘’‡„"
_WORD_CHARS = re.compile(r"[a-z0-9]")
_STRAY = re.compile(r"[()\[\]<>\x15]")


def _code_name(body: str) -> str:
    body = body.strip()
    if body.startswith("+"):
        return body[1:].strip().lower()
    return body.lower()


def normalize_text(raw: str) -> tuple[list[str], set[str]]:
    """Normalize one tier body into a lowercased word list.

    Returns ``(tokens, codes)`` where ``codes`` holds the bracketed codes seen
    (``"exc"`` for ``[+ exc]``, ``"/"`` for retracing, ...). An empty token
    list means the utterance should be dropped.
    """
    codes: set[str] = set()
    text = _BULLET.sub(" ", raw)

    # retraced material is removed together with its marker
    def _retrace(m: re.Match) -> str:
        marker = m.group(0)[m.group(0).rindex("[") :]
        codes.add(marker.strip("[]"))
        return " "

    text = _RETRACE.sub(_retrace, text)

    def _bracket(m: re.Match) -> str:
        codes.add(_code_name(m.group(1)))
        return " "

    text = _BRACKET.sub(_bracket, text)
    text = _ANGLE.sub(" ", text)
    text = _PAUSE.sub(" ", text)

    tokens: list[str] = []
    for tok in text.split():
        tok = tok.lower()
        if "@" in tok:
            tok = tok.split("@", 1)[0]
        tok = _STRAY.sub("", tok).strip(_EDGE_PUNCT)
        # fillers (&uh), linkers (+...), omitted words (0is), comments
        if tok.startswith(("&", "+", "%", "#")) or (tok.startswith("0") and len(tok) > 1):
            continue
        if not tok or tok in _UNINTELLIGIBLE or not _WORD_CHARS.search(tok):
            continue
        tokens.append(tok)
    return tokens, codes


# --------------------------------------------------------------------------
# header parsing

_ID_KEYS = {
    "subject": "subject_id",
    "subject_id": "subject_id",
    "visit": "visit_index",
    "visit_index": "visit_index",
    "dx": "diagnosis",
    "diagnosis": "diagnosis",
    "mmse": "mmse",
    "cdr": "cdr",
    "hdr": "hdr",
}


def _coerce(key: str, value: str):
    value = value.strip()
    if value == "":
        return None
    if key in ("visit_index", "mmse", "hdr"):
        number = float(value)
        if not number.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        return int(number)
    if key == "cdr":
        return float(value)
    if key == "diagnosis":
        return Diagnosis.parse(value)
    return value


def _parse_id(value: str, speakers: frozenset[str]) -> dict:
    if "=" in value:
        fields: dict = {}
        for part in value.split(";"):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise ValueError(f"expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            k = k.strip().lower()
            if k not in _ID_KEYS:
                log.warning("ignoring unknown @ID field %r", k)
                continue
            fields[_ID_KEYS[k]] = _coerce(_ID_KEYS[k], v)
        return fields
    parts = value.split("|")
    if len(parts) < 8:
        raise ValueError(f"pipe-form @ID needs at least 8 fields, got {len(parts)}")
    if parts[2].strip() not in speakers:
        return {}
    fields = {}
    if parts[5].strip():
        fields["diagnosis"] = Diagnosis.parse(parts[5])
    custom = parts[9].strip() if len(parts) > 9 else ""
    if custom:
        try:
            fields["mmse"] = int(float(custom))
        except ValueError:
            log.warning("ignoring non-numeric custom @ID field %r", custom)
    return fields


# --------------------------------------------------------------------------
# transcript parsing

_TIER = re.compile(r"^\*([A-Za-z0-9_]+):[ \t]?(.*)$")
_DEPENDENT = re.compile(r"^%[A-Za-z0-9_]+:")
_HEADER = re.compile(r"^@([A-Za-z0-9_ ]+)(?::[ \t]*(.*))?$")


def _logical_lines(stream: IO[str]) -> Iterator[tuple[int, str]]:
    """Join tab-continued lines onto their tier; yields (first line number, text)."""
    pending: tuple[int, str] | None = None
    for no, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if line.startswith("\t") and pending is not None:
            pending = (pending[0], pending[1] + " " + line.strip())
            continue
        if pending is not None:
            yield pending
        pending = (no, line)
    if pending is not None:
        yield pending


def parse_transcript(
    raw: str | IO[str],
    dialect: str = "chat",
    speakers: Iterable[str] = DEFAULT_SPEAKERS,
    source: str | None = None,
    defaults: Mapping | None = None,
) -> Narrative:
    """Parse one transcript into a :class:`Narrative` of subject utterances.

    ``defaults`` fills metadata the header does not carry (e.g. subject and
    visit recovered from the file name).
    """
    if dialect not in DIALECTS:
        raise ConfigurationError(f"unknown dialect {dialect!r}; supported: {DIALECTS}")
    stream = io.StringIO(raw) if isinstance(raw, str) else raw
    speakers = frozenset(speakers)
    meta: dict = dict(defaults or {})
    utterances: list[Utterance] = []
    dropped: list[str] = []

    for no, line in _logical_lines(stream):
        if not line.strip():
            continue
        if line.startswith("@"):
            m = _HEADER.match(line)
            if m is None:
                raise ParseError(f"malformed header {line!r}", no, source)
            if m.group(1).strip().upper() == "ID":
                try:
                    meta.update(_parse_id(m.group(2) or "", speakers))
                except ValueError as exc:
                    raise ParseError(f"malformed @ID header {line!r}: {exc}", no, source) from exc
            continue
        if _DEPENDENT.match(line):
            continue
        m = _TIER.match(line)
        if m is None:
            log.warning("%s:%d: ignoring line outside the supported dialect: %r", source or "<stream>", no, line)
            continue
        speaker, body = m.group(1), m.group(2)
        if speaker not in speakers:
            continue
        tokens, codes = normalize_text(body)
        if not tokens:
            dropped.append(line)
            continue
        utterances.append(
            Utterance(
                index=len(utterances),
                speaker=speaker,
                text=" ".join(tokens),
                disruptive=EXCLUSION_CODE in codes,
                raw=line,
            )
        )

    if not utterances:
        raise ParseError("no utterances", None, source)
    meta.setdefault("subject_id", Path(source).stem if source else "unknown")
    meta.setdefault("visit_index", 1)
    try:
        session = SessionMeta(**meta)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid session metadata: {exc}", None, source) from exc
    return Narrative(session, tuple(utterances), source=source, dropped=tuple(dropped))


# --------------------------------------------------------------------------
# cohort loading

_PITT_NAME = re.compile(r"^(?P<subject>\d+)-(?P<visit>\d+)$")
TRANSCRIPT_SUFFIXES = (".cha", ".chat")


def _defaults_from_name(path: Path) -> dict:
    # Pitt naming: 001-0.cha is subject 001, first visit
    m = _PITT_NAME.match(path.stem)
    if m:
        return {"subject_id": m.group("subject"), "visit_index": int(m.group("visit")) + 1}
    return {"subject_id": path.stem}


def read_metadata_table(path: str | Path) -> dict[tuple[str, int], dict]:
    """Read a delimited metadata table keyed by ``(subject_id, visit_index)``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read metadata table {path}: {exc}") from exc
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0] if text else ",", delimiters=",\t;")
    except csv.Error:
        dialect = csv.excel
    rows: dict[tuple[str, int], dict] = {}
    for line_no, row in enumerate(csv.DictReader(io.StringIO(text), dialect=dialect), start=2):
        try:
            subject = row["subject_id"].strip()
            visit = int(row["visit_index"])
            values = {}
            for col in ("diagnosis", "mmse", "cdr", "hdr"):
                cell = row.get(col)
                if cell is not None and cell.strip() != "":
                    values[col] = _coerce(col, cell)
        except (KeyError, ValueError, AttributeError) as exc:
            raise IngestError(f"{path}: line {line_no}: bad metadata row: {exc}") from exc
        rows[(subject, visit)] = values
    return rows


def load_cohort(
    root: str | Path,
    metadata: str | Path | None = None,
    dialect: str = "chat",
    speakers: Iterable[str] = DEFAULT_SPEAKERS,
) -> Corpus:
    """Parse every transcript under ``root`` (recursively) into a Corpus.

    Metadata-table values override header values.
    """
    root = Path(root)
    if root.is_file():
        files = [root]
    else:
        files = sorted(p for p in root.rglob("*") if p.suffix.lower() in TRANSCRIPT_SUFFIXES)
    table = read_metadata_table(metadata) if metadata else {}
    narratives = []
    for path in files:
        try:
            with path.open(encoding="utf-8") as fh:
                nar = parse_transcript(
                    fh, dialect, speakers, source=str(path), defaults=_defaults_from_name(path)
                )
        except (OSError, UnicodeDecodeError) as exc:
            raise IngestError(f"cannot read {path}: {exc}") from exc
        override = table.get((nar.meta.subject_id, nar.meta.visit_index))
        if override:
            try:
                nar = replace(nar, meta=replace(nar.meta, **override))
            except ValueError as exc:
                raise IngestError(f"{path}: metadata override invalid: {exc}") from exc
        narratives.append(nar)
    return Corpus(narratives)


# --------------------------------------------------------------------------
# serialization

def corpus_to_dict(corpus: Corpus) -> dict:
    out = []
    for nar in corpus:
        m = nar.meta
        out.append(
            {
                "meta": {
                    "subject_id": m.subject_id,
                    "visit_index": m.visit_index,
                    "diagnosis": m.diagnosis.value,
                    "mmse": m.mmse,
                    "cdr": m.cdr,
                    "hdr": m.hdr,
                },
                "source": nar.source,
                "dropped": list(nar.dropped),
                "utterances": [
                    {"speaker": u.speaker, "text": u.text, "disruptive": u.disruptive, "raw": u.raw}
                    for u in nar.utterances
                ],
            }
        )
    return {"narratives": out}


def corpus_from_dict(data: Mapping) -> Corpus:
    narratives = []
    for item in data["narratives"]:
        meta = dict(item["meta"])
        meta["diagnosis"] = Diagnosis(meta["diagnosis"])
        utts = tuple(
            Utterance(i, u["speaker"], u["text"], bool(u["disruptive"]), u.get("raw", ""))
            for i, u in enumerate(item["utterances"])
        )
        narratives.append(
            Narrative(SessionMeta(**meta), utts, item.get("source"), tuple(item.get("dropped", ())))
        )
    return Corpus(narratives)
