"""Alternating-role decoding and the interactive chat session.

An utterance is generated by forcing the role-prefix token and sampling
until the three-newline stop pattern. Histories that exceed the position
budget drop oldest whole utterances, never partial ones, so role spans
stay well formed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .bpe import NEWLINE_ID, Vocab, decode, encode
from .corpus import Dialog, Role, Utterance, serialize_unified
from .errors import CapacityError, ConfigError, FormatError, TurnOrderError
from .model import RoleAlternatingModel
from .seeding import derive_seed

_WS_OR_CONTROL = re.compile(r"[\s\x00-\x1f\x7f]+")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "top_p"
    top_p: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_p"):
            raise ConfigError(f"unknown decoding strategy {self.strategy!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be positive")


def _nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep-mask of the smallest probability-sorted prefix with mass >= top_p."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p)) + 1
    keep = np.zeros(probs.size, dtype=bool)
    keep[order[:cut]] = True
    return keep


def select_next(logits_row: np.ndarray, cfg: DecodeConfig,
                rng: np.random.Generator | None) -> int:
    if cfg.strategy == "greedy":
        return int(np.argmax(logits_row))
    if rng is None:
        raise ConfigError("top-p sampling needs an rng")
    z = logits_row.astype(np.float64) / cfg.temperature
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    keep = _nucleus(probs, cfg.top_p)
    probs = np.where(keep, probs, 0.0)
    probs /= probs.sum()
    return int(np.searchsorted(np.cumsum(probs), rng.random()))


def _sanitize(raw: str) -> str:
    return _WS_OR_CONTROL.sub(" ", raw).strip()


def generate_utterance(m: RoleAlternatingModel, vocab: Vocab,
                       history: Dialog | None, role: Role, cfg: DecodeConfig,
                       rng: np.random.Generator | None = None) -> Utterance:
    """One utterance from the role's model, conditioned on the history.

    Decoding runs at position offset 0. A degenerate emission (nothing
    printable before the stop pattern) becomes the placeholder "...".
    """
    lm = m.lm_for(role)
    max_pos = lm.config.max_positions
    if rng is None and cfg.strategy != "greedy":
        rng = np.random.default_rng(derive_seed(cfg.seed, "decode"))

    utterances = list(history.utterances) if history is not None else []
    while True:
        context = encode(vocab, serialize_unified(Dialog(utterances))) if utterances else []
        if len(context) + 1 + cfg.max_new_tokens <= max_pos:
            break
        if len(utterances) <= 1:
            raise CapacityError(
                "most recent utterance plus generation budget exceeds max_positions")
        utterances.pop(0)

    prefix = b"A:" if role is Role.USER else b"B:"
    ids = list(context) + [vocab.token_to_id[prefix]]
    new: list[int] = []
    while len(new) < cfg.max_new_tokens:
        logits = lm.forward(np.asarray(ids, dtype=np.int64), 0, train=False)
        nxt = select_next(logits.data[-1], cfg, rng)
        ids.append(nxt)
        new.append(nxt)
        if len(new) >= 3 and new[-3:] == [NEWLINE_ID] * 3:
            break
    while new and new[-1] == NEWLINE_ID:
        new.pop()
    text = _sanitize(decode(vocab, new))
    return Utterance(role, text or "...")


@dataclass
class ChatSession:
    model: RoleAlternatingModel
    vocab: Vocab
    human_role: Role
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    history: Dialog | None = None

    def __post_init__(self):
        self._rng = np.random.default_rng(derive_seed(self.decode.seed, "chat"))

    @property
    def model_role(self) -> Role:
        return self.human_role.other

    def next_role(self) -> Role:
        return self.history.next_role() if self.history is not None else Role.USER

    def _append(self, utt: Utterance) -> None:
        existing = self.history.utterances if self.history is not None else []
        keep_id = self.history.id if self.history is not None else "chat"
        self.history = Dialog(existing + [utt], id=keep_id)

    def model_turn(self) -> Utterance:
        if self.next_role() is not self.model_role:
            raise TurnOrderError("it is the human's turn")
        reply = generate_utterance(self.model, self.vocab, self.history,
                                   self.model_role, self.decode, self._rng)
        self._append(reply)
        return reply


def chat_step(session: ChatSession, human_text: str) -> Utterance:
    """Append the human's utterance and produce the model's reply."""
    if session.next_role() is not session.human_role:
        raise TurnOrderError("it is the model's turn")
    text = _sanitize(human_text)
    if not text:
        raise FormatError("human utterance is empty")
    session._append(Utterance(session.human_role, text))
    return session.model_turn()
