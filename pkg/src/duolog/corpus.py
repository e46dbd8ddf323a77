"""Dialog data model and the unified role-prefixed serialization.

A dialog is a strictly alternating sequence of user/system utterances.
On disk, each utterance is rendered as ``A: text`` (user) or ``B: text``
(system) followed by the three-newline suffix that also serves as the
generation stop pattern. A corpus is a UTF-8 JSONL file with one dialog
per line: ``{"id": ..., "text": <unified string>, "slots": {...}}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .errors import DialogParseError, FormatError, IngestionError

SUFFIX = "\n\n\n"


class Role(Enum):
    USER = "user"
    SYSTEM = "system"

    @property
    def prefix(self) -> str:
        return "A:" if self is Role.USER else "B:"

    @property
    def other(self) -> "Role":
        return Role.SYSTEM if self is Role.USER else Role.USER


_PREFIX_TO_ROLE = {"A:": Role.USER, "B:": Role.SYSTEM}
_CONTROL_RE = re.compile(r"[\x00-\x1f\x7f]")


@dataclass(frozen=True)
class Utterance:
    role: Role
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise FormatError("utterance text is empty after trimming")
        if SUFFIX in self.text:
            raise FormatError("utterance text contains the reserved three-newline suffix")
        if _CONTROL_RE.search(self.text):
            raise FormatError("utterance text contains control characters")


@dataclass
class Dialog:
    utterances: list[Utterance]
    annotations: dict[str, str] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        if not self.utterances:
            raise FormatError("a dialog needs at least one utterance")
        for prev, cur in zip(self.utterances, self.utterances[1:]):
            if prev.role is cur.role:
                raise FormatError("dialog roles must strictly alternate")

    def __len__(self) -> int:
        return len(self.utterances)

    def next_role(self) -> Role:
        return self.utterances[-1].role.other


def serialize_unified(dialog: Dialog) -> str:
    """Render a dialog as role-prefixed text, one suffix per utterance."""
    return "".join(f"{u.role.prefix} {u.text}{SUFFIX}" for u in dialog.utterances)


def serialize_utterance(u: Utterance) -> str:
    return f"{u.role.prefix} {u.text}{SUFFIX}"


def parse_unified(s: str, dialog_id: str = "",
                  annotations: dict[str, str] | None = None) -> Dialog:
    """Inverse of ``serialize_unified``; errors carry a byte offset."""
    utterances: list[Utterance] = []
    pos = 0  # character position; converted to bytes for error reports

    def byte_offset(char_pos: int) -> int:
        return len(s[:char_pos].encode("utf-8"))

    while pos < len(s):
        prefix = s[pos:pos + 2]
        role = _PREFIX_TO_ROLE.get(prefix)
        if role is None:
            raise DialogParseError(f"unknown role prefix {prefix!r}", byte_offset(pos))
        if s[pos + 2:pos + 3] != " ":
            raise DialogParseError("expected a single space after the role prefix",
                                   byte_offset(pos + 2))
        end = s.find(SUFFIX, pos + 3)
        if end < 0:
            raise DialogParseError("utterance is missing its three-newline suffix",
                                   byte_offset(pos))
        text = s[pos + 3:end]
        if utterances and utterances[-1].role is role:
            raise DialogParseError("roles must alternate", byte_offset(pos))
        try:
            utterances.append(Utterance(role, text))
        except FormatError as exc:
            raise DialogParseError(str(exc), byte_offset(pos + 3)) from exc
        pos = end + len(SUFFIX)
    if not utterances:
        raise DialogParseError("no utterances found", 0)
    return Dialog(utterances, annotations=dict(annotations or {}), id=dialog_id)


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass
class CorpusStats:
    dialog_count: int
    avg_turns_per_dialog: float
    avg_tokens_per_turn: float
    avg_tokens_per_dialog: float
    unique_token_count: int

    def as_dict(self) -> dict:
        return {
            "dialog_count": self.dialog_count,
            "avg_turns_per_dialog": self.avg_turns_per_dialog,
            "avg_tokens_per_turn": self.avg_tokens_per_turn,
            "avg_tokens_per_dialog": self.avg_tokens_per_dialog,
            "unique_token_count": self.unique_token_count,
        }


def corpus_stats(corpus: Sequence[Dialog],
                 tokenize: Callable[[str], list] | None = None) -> CorpusStats:
    """Corpus-level averages. Default tokenization is whitespace splitting.

    ``avg_tokens_per_turn`` is the global mean (total tokens over total
    turns), so the per-dialog average factors exactly.
    """
    if not corpus:
        raise FormatError("corpus_stats needs a nonempty corpus")
    tokenize = tokenize or str.split
    total_turns = 0
    total_tokens = 0
    uniq = set()
    for d in corpus:
        total_turns += len(d)
        for u in d.utterances:
            toks = tokenize(u.text)
            total_tokens += len(toks)
            uniq.update(toks)
    n = len(corpus)
    return CorpusStats(
        dialog_count=n,
        avg_turns_per_dialog=total_turns / n,
        avg_tokens_per_turn=total_tokens / total_turns,
        avg_tokens_per_dialog=total_tokens / n,
        unique_token_count=len(uniq),
    )


# ---------------------------------------------------------------------------
# tabular ingestion


_WS_RE = re.compile(r"\s+")


@dataclass
class IngestReport:
    dialogs: list[Dialog]
    dropped: int


def ingest_tabular(records: Iterable[tuple[str, int, str, str]],
                   role_mapping: dict[str, Role]) -> IngestReport:
    """Group (dialog_id, turn_index, speaker_label, text) rows into dialogs.

    Rows are grouped by dialog id in first-appearance order and sorted by
    turn index. Consecutive same-role turns are merged with a single
    space so alternation holds. Dialogs that still violate the data model
    (e.g. every turn empty) are dropped and counted.
    """
    grouped: dict[str, list[tuple[int, Role, str]]] = {}
    for dialog_id, turn_index, label, text in records:
        role = role_mapping.get(label)
        if role is None:
            raise IngestionError(f"speaker label {label!r} has no role mapping")
        grouped.setdefault(str(dialog_id), []).append((int(turn_index), role, text))

    dialogs: list[Dialog] = []
    dropped = 0
    for dialog_id, turns in grouped.items():
        turns.sort(key=lambda t: t[0])
        merged: list[tuple[Role, list[str]]] = []
        for _, role, text in turns:
            clean = _WS_RE.sub(" ", text).strip()
            if not clean:
                continue
            if merged and merged[-1][0] is role:
                merged[-1][1].append(clean)
            else:
                merged.append((role, [clean]))
        try:
            dialogs.append(Dialog(
                [Utterance(role, " ".join(parts)) for role, parts in merged],
                id=dialog_id))
        except FormatError:
            dropped += 1
    return IngestReport(dialogs=dialogs, dropped=dropped)


# ---------------------------------------------------------------------------
# corpus files (JSONL, one dialog per line)


def write_corpus(path: str | Path, dialogs: Iterable[Dialog]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogs:
            record = {"id": d.id, "text": serialize_unified(d)}
            if d.annotations:
                record["slots"] = d.annotations
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def read_corpus(path: str | Path) -> list[Dialog]:
    return list(iter_corpus(path))


def iter_corpus(path: str | Path) -> Iterator[Dialog]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DialogParseError(f"line {line_no}: invalid JSON: {exc}", 0) from exc
            try:
                yield parse_unified(record["text"], dialog_id=record.get("id", ""),
                                    annotations=record.get("slots"))
            except DialogParseError as exc:
                raise DialogParseError(f"line {line_no}: {exc.args[0]}", exc.offset) from exc
            except KeyError as exc:
                raise DialogParseError(f"line {line_no}: missing field {exc}", 0) from exc
