"""Byte-level BPE tokenizer with atomic role-prefix and newline tokens.

The base alphabet is the 256 bytes plus two dedicated tokens for the
role prefixes "A:" and "B:"; the newline's atomic token is byte 10
itself. These reserved sequences never participate in merges, so token
boundaries always align with utterance boundaries: every utterance is
tokenized independently of its neighbors and the three-newline suffix is
always exactly three newline tokens (the generation stop pattern).
"""

from __future__ import annotations

import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Dialog, Role, serialize_unified, serialize_utterance
from .errors import ConfigError, VocabError

_RESERVED = (b"A:", b"B:", b"\n")
NEWLINE_ID = 10
BASE_SIZE = 258  # 256 bytes + "A:" + "B:"


def _split_reserved(data: bytes) -> list[tuple[bool, bytes]]:
    """Split into maximal free runs and single reserved sequences."""
    parts: list[tuple[bool, bytes]] = []
    free_start = 0
    i = 0
    n = len(data)
    while i < n:
        two = data[i:i + 2]
        if two == b"A:" or two == b"B:":
            if free_start < i:
                parts.append((False, data[free_start:i]))
            parts.append((True, two))
            i += 2
            free_start = i
        elif data[i] == NEWLINE_ID:
            if free_start < i:
                parts.append((False, data[free_start:i]))
            parts.append((True, b"\n"))
            i += 1
            free_start = i
        else:
            i += 1
    if free_start < n:
        parts.append((False, data[free_start:]))
    return parts


@dataclass
class Vocab:
    merges: list[tuple[int, int]]
    token_to_id: dict[bytes, int]
    id_to_token: dict[int, bytes]
    _ranks: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)
    _encode_cache: dict[bytes, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._ranks:
            self._ranks = {pair: rank for rank, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocab) and self.merges == other.merges
                and self.token_to_id == other.token_to_id)


def _base_tables() -> tuple[dict[bytes, int], dict[int, bytes]]:
    id_to_token = {i: bytes([i]) for i in range(256)}
    id_to_token[256] = b"A:"
    id_to_token[257] = b"B:"
    return {tok: i for i, tok in id_to_token.items()}, id_to_token


def _merge_word(word: tuple[int, ...], left: int, right: int,
                new_id: int) -> tuple[int, ...]:
    out = []
    i = 0
    n = len(word)
    while i < n:
        if i + 1 < n and word[i] == left and word[i + 1] == right:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Sequence, vocab_size: int = 2000) -> Vocab:
    """Learn merges greedily by pair frequency until vocab_size tokens.

    Deterministic: frequency ties break toward the lexicographically
    smallest (left bytes, right bytes) pair. Stops early once no pair
    occurs at least twice. Corpus items may be Dialogs or plain strings.
    """
    if vocab_size < BASE_SIZE + 1:
        raise ConfigError(
            f"vocab_size {vocab_size} below base alphabet size {BASE_SIZE} + 1")
    texts = [serialize_unified(d) if isinstance(d, Dialog) else d for d in corpus]
    if not texts:
        raise VocabError("cannot train a vocabulary on an empty corpus")

    token_to_id, id_to_token = _base_tables()

    # distinct free segments with frequencies; reserved chunks never merge
    words: dict[tuple[int, ...], int] = defaultdict(int)
    for text in texts:
        for reserved, chunk in _split_reserved(text.encode("utf-8")):
            if not reserved and len(chunk) > 1:
                words[tuple(chunk)] += 1
    words = dict(words)

    pair_counts: dict[tuple[int, int], int] = defaultdict(int)
    pair_words: dict[tuple[int, int], set] = defaultdict(set)
    for word, freq in words.items():
        for pair in zip(word, word[1:]):
            pair_counts[pair] += freq
            pair_words[pair].add(word)

    heap = [(-count, id_to_token[l], id_to_token[r], l, r)
            for (l, r), count in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[int, int]] = []
    size = BASE_SIZE
    while size < vocab_size and heap:
        neg_count, _, _, left, right = heapq.heappop(heap)
        pair = (left, right)
        current = pair_counts.get(pair, 0)
        if current != -neg_count:  # stale entry
            if current >= 2:
                heapq.heappush(heap, (-current, id_to_token[left],
                                      id_to_token[right], left, right))
            continue
        if current < 2:
            break

        new_bytes = id_to_token[left] + id_to_token[right]
        existing = token_to_id.get(new_bytes)
        if existing is None:
            new_id = max(id_to_token) + 1
            token_to_id[new_bytes] = new_id
            id_to_token[new_id] = new_bytes
            size += 1
        else:
            # same byte string reachable via two merge paths; reuse the id
            new_id = existing
        merges.append(pair)

        for word in list(pair_words.get(pair, ())):
            freq = words.pop(word, 0)
            if not freq:
                continue
            for p in zip(word, word[1:]):
                pair_counts[p] -= freq
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                pair_words[p].discard(word)
            new_word = _merge_word(word, left, right, new_id)
            words[new_word] = words.get(new_word, 0) + freq
            for p in zip(new_word, new_word[1:]):
                pair_counts[p] = pair_counts.get(p, 0) + freq
                pair_words[p].add(new_word)
                heapq.heappush(heap, (-pair_counts[p], id_to_token[p[0]],
                                      id_to_token[p[1]], p[0], p[1]))
        pair_counts.pop(pair, None)
        pair_words.pop(pair, None)

    return Vocab(merges=merges, token_to_id=token_to_id, id_to_token=id_to_token)


def _encode_word(v: Vocab, chunk: bytes) -> list[int]:
    cached = v._encode_cache.get(chunk)
    if cached is not None:
        return cached
    ids = list(chunk)
    while len(ids) > 1:
        best_rank = None
        best_pair = None
        for pair in zip(ids, ids[1:]):
            rank = v._ranks.get(pair)
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank = rank
                best_pair = pair
        if best_pair is None:
            break
        left, right = best_pair
        merged_id = v.token_to_id[v.id_to_token[left] + v.id_to_token[right]]
        ids = list(_merge_word(tuple(ids), left, right, merged_id))
    v._encode_cache[chunk] = ids
    return ids


def encode(v: Vocab, s: str) -> list[int]:
    out: list[int] = []
    for reserved, chunk in _split_reserved(s.encode("utf-8")):
        if reserved:
            out.append(v.token_to_id[chunk])
        else:
            out.extend(_encode_word(v, chunk))
    return out


def decode(v: Vocab, ids: Iterable[int]) -> str:
    pieces = []
    for i in ids:
        tok = v.id_to_token.get(int(i))
        if tok is None:
            raise VocabError(f"unknown token id {i}")
        pieces.append(tok)
    return b"".join(pieces).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# dialog-aware encoding


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    role: Role
    u: int  # 1-based utterance index

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class TokenizedDialog:
    ids: list[int]
    utterance_spans: list[Span]
    U: int


def encode_dialog(v: Vocab, d: Dialog) -> TokenizedDialog:
    """Tokenize a dialog with per-utterance spans.

    Reserved tokens guarantee no merge crosses an utterance boundary, so
    per-utterance encoding concatenates to exactly encode(serialize(d)).
    """
    ids: list[int] = []
    spans: list[Span] = []
    for u_index, utt in enumerate(d.utterances, start=1):
        piece = encode(v, serialize_utterance(utt))
        spans.append(Span(len(ids), len(ids) + len(piece), utt.role, u_index))
        ids.extend(piece)
    return TokenizedDialog(ids=ids, utterance_spans=spans, U=len(spans))


# ---------------------------------------------------------------------------
# vocab file


def write_vocab(path: str | Path, v: Vocab) -> None:
    header = {
        "format": "duolog-vocab",
        "version": 1,
        "base_alphabet": "bytes+prefixes",
        "reserved": ["A:", "B:", "\n"],
        "n_merges": len(v.merges),
        "size": v.size,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for left, right in v.merges:
            fh.write(f"{left} {right}\n")


def read_vocab(path: str | Path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise VocabError(f"bad vocab header: {exc}") from exc
        if header.get("format") != "duolog-vocab" or header.get("version") != 1:
            raise VocabError("unrecognized vocab file format")
        token_to_id, id_to_token = _base_tables()
        merges: list[tuple[int, int]] = []
        for line in fh:
            if not line.strip():
                continue
            try:
                left, right = (int(x) for x in line.split())
            except ValueError as exc:
                raise VocabError(f"bad merge line {line!r}") from exc
            if left not in id_to_token or right not in id_to_token:
                raise VocabError(f"merge references unknown id: {line!r}")
            new_bytes = id_to_token[left] + id_to_token[right]
            if new_bytes not in token_to_id:
                new_id = max(id_to_token) + 1
                token_to_id[new_bytes] = new_id
                id_to_token[new_id] = new_bytes
            merges.append((left, right))
        if len(merges) != header.get("n_merges"):
            raise VocabError("merge count does not match header")
    return Vocab(merges=merges, token_to_id=token_to_id, id_to_token=id_to_token)
