"""Automatic dialog metrics: perplexity, corpus BLEU, and Success F1.

BLEU here is fully pinned: lowercased whitespace tokens, modified k-gram
precisions, brevity penalty exp(min(0, 1 - r/c)), and add-1 smoothing
only for orders above 1 with a zero numerator. Success F1 counts a slot
value as provided when it appears, lowercased, as a contiguous run of
whitespace tokens in a dialog's generated system text; precision is
measured against mentions of any value from the corpus-wide inventory.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bpe import TokenizedDialog, Vocab, encode_dialog
from .corpus import Dialog, Role
from .errors import ConfigError, ShapeError
from .generate import DecodeConfig, generate_utterance
from .model import RoleAlternatingModel, token_is_user
from .seeding import derive_seed
from .tensor import _log_softmax


# ---------------------------------------------------------------------------
# perplexity


def perplexity(m: RoleAlternatingModel, corpus: Sequence[TokenizedDialog],
               side: str = "both") -> float:
    """exp(mean next-token NLL) at offset 0, undiscounted.

    ``side`` selects whose predicted tokens count: the user model's, the
    system model's, or both (each model scored on its own role's spans).
    """
    if side not in ("user", "system", "both"):
        raise ConfigError(f"unknown perplexity side {side!r}")
    total_nll = 0.0
    total_count = 0
    for td in corpus:
        ids = np.asarray(td.ids, dtype=np.int64)
        if ids.size < 2:
            continue
        targets = ids[1:]
        target_is_user = token_is_user(td)[1:]
        for role_name, lm, mask in (
                ("user", m.user_lm, target_is_user),
                ("system", m.system_lm, ~target_is_user)):
            if side not in (role_name, "both") or not mask.any():
                continue
            log_probs = _log_softmax(lm.forward(ids, 0, train=False)
                                     .data.astype(np.float64))
            nll = -log_probs[np.arange(ids.size - 1), targets]
            total_nll += float(nll[mask].sum())
            total_count += int(mask.sum())
    if total_count == 0:
        raise ConfigError(f"no predicted tokens for side {side!r}")
    return float(math.exp(total_nll / total_count))


# ---------------------------------------------------------------------------
# BLEU


def _tokens(s: str) -> list[str]:
    return s.lower().split()


def _kgrams(tokens: list[str], k: int) -> Counter:
    return Counter(tuple(tokens[i:i + k]) for i in range(len(tokens) - k + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], n: int) -> float:
    """Corpus-level BLEU-n over aligned hypothesis/reference pairs."""
    if not 1 <= n <= 4:
        raise ConfigError(f"BLEU order must lie in 1..4, got {n}")
    if len(hypotheses) != len(references):
        raise ShapeError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ConfigError("bleu needs at least one pair")
    hyp_tok = [_tokens(h) for h in hypotheses]
    ref_tok = [_tokens(r) for r in references]
    c = sum(len(t) for t in hyp_tok)
    r = sum(len(t) for t in ref_tok)
    if c == 0:
        return 0.0

    log_prec_sum = 0.0
    for k in range(1, n + 1):
        numer = 0
        denom = 0
        for h, g in zip(hyp_tok, ref_tok):
            h_counts = _kgrams(h, k)
            g_counts = _kgrams(g, k)
            numer += sum(min(count, g_counts[gram])
                         for gram, count in h_counts.items())
            denom += max(len(h) - k + 1, 0)
        if numer == 0:
            if k == 1:
                return 0.0
            numer, denom = numer + 1, denom + 1
        log_prec_sum += math.log(numer / denom)
    bp = math.exp(min(0.0, 1.0 - r / c))
    return float(bp * math.exp(log_prec_sum / n))


# ---------------------------------------------------------------------------
# Success F1


def _value_phrase(value: str) -> tuple[str, ...]:
    phrase = tuple(_tokens(value))
    if not phrase:
        raise ConfigError("slot values must be nonempty strings")
    return phrase


def _contains(tokens: list[str], phrase: tuple[str, ...]) -> bool:
    k = len(phrase)
    return any(tuple(tokens[i:i + k]) == phrase
               for i in range(len(tokens) - k + 1))


def success_f1(generated: Sequence[str],
               gold_slots: Sequence[dict[str, str]]
               ) -> tuple[float, float, float]:
    """Micro-averaged slot-provision precision/recall/F1.

    ``generated[i]`` is dialog i's generated system text; a dialog's gold
    values count as matched when present, and any present value from the
    corpus-wide inventory counts as a predicted mention.
    """
    if len(generated) != len(gold_slots):
        raise ShapeError(
            f"{len(generated)} outputs vs {len(gold_slots)} gold slot maps")
    gold_sets = [{_value_phrase(v) for v in slots.values()}
                 for slots in gold_slots]
    inventory = set().union(*gold_sets) if gold_sets else set()
    if not inventory:
        raise ConfigError("success_f1 needs at least one gold slot value")

    matched = predicted = gold_total = 0
    for text, gold in zip(generated, gold_sets):
        tokens = _tokens(text)
        present = {phrase for phrase in inventory if _contains(tokens, phrase)}
        matched += len(gold & present)
        predicted += len(present)
        gold_total += len(gold)
    precision = matched / predicted if predicted else 0.0
    recall = matched / gold_total
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


# ---------------------------------------------------------------------------
# batch evaluation


@dataclass
class MetricsReport:
    perplexity: float
    bleu: dict[int, float]
    success_precision: float
    success_recall: float
    success_f1: float
    dialog_count: int
    turn_count: int

    def as_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "bleu": {str(n): v for n, v in self.bleu.items()},
            "success_precision": self.success_precision,
            "success_recall": self.success_recall,
            "success_f1": self.success_f1,
            "dialog_count": self.dialog_count,
            "turn_count": self.turn_count,
        }

    def render_table(self) -> str:
        rows = [("perplexity", f"{self.perplexity:.4f}")]
        rows += [(f"bleu-{n}", f"{v:.4f}") for n, v in sorted(self.bleu.items())]
        rows += [("success precision", f"{self.success_precision:.4f}"),
                 ("success recall", f"{self.success_recall:.4f}"),
                 ("success f1", f"{self.success_f1:.4f}"),
                 ("dialogs", str(self.dialog_count)),
                 ("system turns", str(self.turn_count))]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def evaluate(m: RoleAlternatingModel, corpus: Sequence[Dialog], vocab: Vocab,
             decode: DecodeConfig | None = None) -> MetricsReport:
    """Score a corpus: teacher-forced regeneration of every system turn.

    Each system utterance is regenerated from its gold history; BLEU
    aligns generated and gold turns, Success F1 sees each dialog's
    concatenated generated system text, and perplexity reads the gold
    corpus at offset 0.
    """
    if not corpus:
        raise ConfigError("evaluate needs a nonempty corpus")
    decode = decode or DecodeConfig(strategy="greedy")
    rng = (np.random.default_rng(derive_seed(decode.seed, "evaluate"))
           if decode.strategy != "greedy" else None)

    hyp_turns: list[str] = []
    ref_turns: list[str] = []
    per_dialog_text: list[str] = []
    gold_maps: list[dict[str, str]] = []
    annotated = 0
    for d in corpus:
        generated_here = []
        for i, utt in enumerate(d.utterances):
            if utt.role is not Role.SYSTEM:
                continue
            history = Dialog(d.utterances[:i], id=d.id) if i else None
            gen = generate_utterance(m, vocab, history, Role.SYSTEM, decode, rng)
            hyp_turns.append(gen.text)
            ref_turns.append(utt.text)
            generated_here.append(gen.text)
        per_dialog_text.append(" ".join(generated_here))
        gold_maps.append(d.annotations)
        if d.annotations:
            annotated += 1
    if not hyp_turns:
        raise ConfigError("corpus contains no system turns to evaluate")
    if not annotated:
        raise ConfigError("evaluate needs slot annotations for Success F1")

    precision, recall, f1 = success_f1(per_dialog_text, gold_maps)
    tokenized = [encode_dialog(vocab, d) for d in corpus]
    return MetricsReport(
        perplexity=perplexity(m, tokenized, side="both"),
        bleu={n: bleu(hyp_turns, ref_turns, n) for n in (1, 2, 4)},
        success_precision=precision, success_recall=recall, success_f1=f1,
        dialog_count=len(corpus), turn_count=len(hyp_turns))
