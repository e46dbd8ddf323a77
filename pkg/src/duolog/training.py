"""Loss stack and training loop for the role-alternating LM pair.

The LM objective weights each utterance's next-token cross-entropy by
gamma^(U-u), so later turns (richer context) dominate. A frozen teacher
adds alpha * KL(student || teacher) per model on the same masked
positions, with alpha = alpha0 * lambda^iteration decaying per optimizer
step. Each of the two models takes one optimizer step per iteration,
driven by its own masked share of the combined objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bpe import TokenizedDialog
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Role
from .errors import (ConfigError, NonFiniteGradientError, ShapeError,
                     TrainingAborted)
from .model import (ModelConfig, PositionSampler, RoleAlternatingModel,
                    TransformerLM, token_is_user, token_span_u)
from .optim import AdamW
from .seeding import derive_seed
from . import tensor as T
from .tensor import GradientTape, Tensor

KL_DIRECTIONS = ("student_to_teacher", "teacher_to_student")


@dataclass
class TrainConfig:
    total_steps: int
    seed: int = 0
    gamma: float = 0.95
    alpha0: float = 0.1
    lambda_: float = 0.9999
    learning_rate: float = 1e-4
    warmup_fraction: float = 0.10
    batch_size: int = 8
    spr_enabled: bool = True
    teacher_enabled: bool = True
    discount_enabled: bool = True
    kl_direction: str = "student_to_teacher"
    checkpoint_interval: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.alpha0 < 0.0:
            raise ConfigError("alpha0 must be nonnegative")
        if not 0.0 < self.lambda_ <= 1.0:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lambda_}")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.discount_enabled else 1.0

    def as_dict(self) -> dict:
        out = {
            "total_steps": self.total_steps, "seed": self.seed,
            "gamma": self.gamma, "alpha0": self.alpha0, "lambda": self.lambda_,
            "learning_rate": self.learning_rate,
            "warmup_fraction": self.warmup_fraction,
            "batch_size": self.batch_size,
            "spr_enabled": self.spr_enabled,
            "teacher_enabled": self.teacher_enabled,
            "discount_enabled": self.discount_enabled,
            "kl_direction": self.kl_direction,
            "checkpoint_interval": self.checkpoint_interval,
        }
        return out

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


def discount_weights(U: int, gamma: float) -> list[float]:
    """w[u] = gamma^(U-u) for u = 1..U; the final utterance weighs 1."""
    if U < 1:
        raise ConfigError(f"utterance count must be at least 1, got {U}")
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    return [gamma ** (U - u) for u in range(1, U + 1)]


def alpha_at(iteration: int, alpha0: float = 0.1, lambda_: float = 0.9999) -> float:
    """Distillation weight at a 0-based optimizer iteration."""
    if iteration < 0:
        raise ConfigError("iteration must be nonnegative")
    return alpha0 * lambda_ ** iteration


# ---------------------------------------------------------------------------
# loss computation


@dataclass(frozen=True)
class UtteranceLoss:
    u: int
    weight: float
    ce_sum: float
    token_count: int


@dataclass
class LossBreakdown:
    lm_loss: float
    kl_loss: float | None
    alpha: float
    total: float
    per_utterance: list[UtteranceLoss]
    raw_lm_sum: float
    weighted_token_count: float


@dataclass
class LmLossGraph:
    loss: Tensor  # normalized; what optimization consumes
    raw_sum: float
    normalized: float
    per_utterance: list[UtteranceLoss]
    weighted_token_count: float
    user_logits: Tensor
    system_logits: Tensor
    user_mask: np.ndarray
    system_mask: np.ndarray


def _predicted_counts(td: TokenizedDialog) -> list[int]:
    # span 1 loses the dialog's first token: nothing precedes it
    return [span.length - (1 if span.start == 0 else 0)
            for span in td.utterance_spans]


def lm_loss(m: RoleAlternatingModel, td: TokenizedDialog,
            offsets: tuple[int, int] = (0, 0), gamma: float = 0.95,
            train: bool = False,
            dropout_rng: np.random.Generator | None = None) -> LmLossGraph:
    """History-discounted next-token loss over both roles of one dialog.

    Position t of the role-appropriate model predicts token t+1; the
    weight and predicting model follow the span containing the target.
    The normalizer is the gamma-weighted predicted-token count, so the
    optimized value stays scale-free across dialog lengths; the raw
    weighted sum is reported alongside.
    """
    ids = np.asarray(td.ids, dtype=np.int64)
    n = ids.size
    if n < 2:
        raise ShapeError("a dialog must tokenize to at least two tokens")
    weights_u = discount_weights(td.U, gamma)
    user_logits = m.user_lm.forward(ids, offsets[0], train, dropout_rng)
    system_logits = m.system_lm.forward(ids, offsets[1], train, dropout_rng)

    targets = ids[1:]
    target_u = token_span_u(td)[1:]
    target_is_user = token_is_user(td)[1:]
    pos_weights = np.array([weights_u[u - 1] for u in target_u])
    user_mask = target_is_user.astype(np.float64)
    system_mask = (~target_is_user).astype(np.float64)

    parts = []
    ce_all = np.zeros(n - 1)
    for role_mask, logits in ((user_mask, user_logits), (system_mask, system_logits)):
        if role_mask.any():
            ce = T.cross_entropy(T.rows(logits, 0, n - 1), targets, role_mask)
            parts.append(T.weighted_sum(ce, pos_weights * role_mask))
            ce_all += np.asarray(ce.data, dtype=np.float64)
    raw = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])

    counts = _predicted_counts(td)
    weighted_count = float(sum(w * c for w, c in zip(weights_u, counts)))
    loss = T.scale(raw, 1.0 / weighted_count)
    per_utterance = []
    for span, w, c in zip(td.utterance_spans, weights_u, counts):
        lo = max(span.start - 1, 0)
        per_utterance.append(UtteranceLoss(
            u=span.u, weight=w, ce_sum=float(ce_all[lo:span.end - 1].sum()),
            token_count=c))
    return LmLossGraph(loss=loss, raw_sum=raw.item(), normalized=loss.item(),
                       per_utterance=per_utterance,
                       weighted_token_count=weighted_count,
                       user_logits=user_logits, system_logits=system_logits,
                       user_mask=user_mask, system_mask=system_mask)


# ---------------------------------------------------------------------------
# teacher


class TeacherHandle:
    """Frozen logits provider; queries clamp into the teacher's capacity."""

    def __init__(self, lm: TransformerLM):
        for p in lm.params.values():
            p.requires_grad = False
        self._lm = lm

    @property
    def vocab_size(self) -> int:
        return self._lm.config.vocab_size

    @property
    def max_positions(self) -> int:
        return self._lm.config.max_positions

    def logits(self, ids, position_offset: int = 0) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        offset = max(0, min(position_offset, self.max_positions - ids.size))
        return self._lm.forward(ids, offset, train=False).data


@dataclass
class TeacherPair:
    user: TeacherHandle
    system: TeacherHandle

    def for_role(self, role: Role) -> TeacherHandle:
        return self.user if role is Role.USER else self.system


def distill_loss(student_logits: Tensor, teacher: TeacherHandle, ids,
                 offset: int, mask, direction: str = "student_to_teacher") -> Tensor:
    """Mean KL per masked predictor position against the frozen teacher.

    The teacher sees the same ids at the student's offset (clamped to its
    own capacity); rows are the predictor positions 0..N-2.
    """
    if direction not in KL_DIRECTIONS:
        raise ConfigError(f"unknown kl_direction {direction!r}")
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size
    if student_logits.data.shape[0] != n:
        raise ShapeError("student logits do not cover the id sequence")
    if teacher.vocab_size != student_logits.data.shape[1]:
        raise ConfigError(
            f"teacher vocab {teacher.vocab_size} differs from student "
            f"vocab {student_logits.data.shape[1]}")
    teacher_rows = Tensor(teacher.logits(ids, offset)[:n - 1].astype(
        student_logits.data.dtype))
    student_rows = T.rows(student_logits, 0, n - 1)
    kl_dir = "p_to_q" if direction == "student_to_teacher" else "q_to_p"
    return T.kl_divergence_rows(student_rows, teacher_rows, mask, kl_dir)


# ---------------------------------------------------------------------------
# combined objective


def total_loss(m: RoleAlternatingModel, td: TokenizedDialog,
               offsets: tuple[int, int] = (0, 0),
               gamma: float = 0.95, teacher: TeacherPair | None = None,
               alpha: float = 0.0, kl_direction: str = "student_to_teacher",
               train: bool = False,
               dropout_rng: np.random.Generator | None = None
               ) -> tuple[Tensor, LossBreakdown]:
    """lm_loss plus alpha-weighted teacher KL; KL absent without a teacher.

    The two per-model KL means are combined weighted by their masked
    position counts, keeping the reported value a mean per predicted
    position across both roles.
    """
    graph = lm_loss(m, td, offsets, gamma, train, dropout_rng)
    if teacher is None:
        return graph.loss, LossBreakdown(
            lm_loss=graph.normalized, kl_loss=None, alpha=0.0,
            total=graph.normalized, per_utterance=graph.per_utterance,
            raw_lm_sum=graph.raw_sum,
            weighted_token_count=graph.weighted_token_count)

    n_user = float(graph.user_mask.sum())
    n_system = float(graph.system_mask.sum())
    kl_parts = []
    if n_user:
        kl_parts.append((n_user, distill_loss(
            graph.user_logits, teacher.user, td.ids, offsets[0],
            graph.user_mask, kl_direction)))
    if n_system:
        kl_parts.append((n_system, distill_loss(
            graph.system_logits, teacher.system, td.ids, offsets[1],
            graph.system_mask, kl_direction)))
    denom = sum(w for w, _ in kl_parts)
    scaled = [T.scale(t, w / denom) for w, t in kl_parts]
    kl = scaled[0] if len(scaled) == 1 else T.add(scaled[0], scaled[1])
    total = T.add(graph.loss, T.scale(kl, alpha))
    return total, LossBreakdown(
        lm_loss=graph.normalized, kl_loss=kl.item(), alpha=alpha,
        total=total.item(), per_utterance=graph.per_utterance,
        raw_lm_sum=graph.raw_sum,
        weighted_token_count=graph.weighted_token_count)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: RoleAlternatingModel
    log: list[dict]
    final_checkpoint: Path | None
    dropped_overlong: int


def _bucket_batches(lengths: list[int], batch_size: int) -> list[list[int]]:
    """Length-sorted contiguous buckets; each bucket is one batch."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train(corpus: Sequence[TokenizedDialog], m: RoleAlternatingModel,
          teacher: TeacherPair | None, cfg: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the full recipe; deterministic for a fixed seed at one thread."""
    if cfg.teacher_enabled and teacher is None:
        raise ConfigError("teacher_enabled requires a teacher")
    if not cfg.teacher_enabled:
        teacher = None
    max_pos = m.config.max_positions
    usable = [td for td in corpus if len(td.ids) <= max_pos and len(td.ids) >= 2]
    dropped = len(corpus) - len(usable)
    if not usable:
        raise ConfigError("no dialog fits within max_positions")

    batches = _bucket_batches([len(td.ids) for td in usable], cfg.batch_size)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "batch_order"))
    dropout_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    sampler_user = PositionSampler(max_pos, derive_seed(cfg.seed, "spr:user"))
    sampler_system = PositionSampler(max_pos, derive_seed(cfg.seed, "spr:system"))

    def make_opt(total_steps):
        return AdamW(lr=cfg.learning_rate, warmup_steps=cfg.warmup_steps,
                     total_steps=total_steps)

    opt_user, opt_system = make_opt(cfg.total_steps), make_opt(cfg.total_steps)
    user_params, system_params = m.user_lm.params, m.system_lm.params

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt: Path | None = None

    def write_ckpt(tag: str, step: int) -> Path:
        path = out_dir / f"ckpt-{tag}.bin"
        save_checkpoint(path, m.params(), {
            "model_config": m.config.as_dict(),
            "train_config": cfg.as_dict(), "step": step})
        return path

    log: list[dict] = []
    train_mode = m.config.dropout_rate > 0.0
    for step in range(cfg.total_steps):
        batch = batches[int(order_rng.integers(len(batches)))]
        alpha = alpha_at(step, cfg.alpha0, cfg.lambda_) if teacher else 0.0
        inv = 1.0 / len(batch)
        sums = {"lm": 0.0, "kl": 0.0, "total": 0.0}
        try:
            for idx in batch:
                td = usable[idx]
                n = len(td.ids)
                if cfg.spr_enabled:
                    offsets = (sampler_user.sample_offset(n),
                               sampler_system.sample_offset(n))
                else:
                    offsets = (0, 0)
                with GradientTape() as tape:
                    loss_t, parts = total_loss(
                        m, td, offsets, cfg.effective_gamma, teacher, alpha,
                        cfg.kl_direction, train=train_mode,
                        dropout_rng=dropout_rng)
                    scaled = T.scale(loss_t, inv)
                    if not np.isfinite(scaled.item()):
                        raise NonFiniteGradientError("loss")
                    tape.backward(scaled)
                sums["lm"] += parts.lm_loss * inv
                sums["total"] += parts.total * inv
                if parts.kl_loss is not None:
                    sums["kl"] += parts.kl_loss * inv
            lr = opt_user.step(user_params)
            opt_system.step(system_params)
        except NonFiniteGradientError as exc:
            raise TrainingAborted(
                f"non-finite value at step {step + 1}: {exc}", last_ckpt) from exc
        opt_user.zero_grad(user_params)
        opt_system.zero_grad(system_params)

        record = {"step": step + 1, "lm": sums["lm"]}
        if teacher is not None:
            record["kl"] = sums["kl"]
            record["alpha"] = alpha
        record["total"] = sums["total"]
        record["lr"] = lr
        log.append(record)

        if (out_dir is not None and cfg.checkpoint_interval
                and (step + 1) % cfg.checkpoint_interval == 0
                and step + 1 < cfg.total_steps):
            last_ckpt = write_ckpt(f"{step + 1:06d}", step + 1)

    if out_dir is not None:
        last_ckpt = write_ckpt("final", cfg.total_steps)
    return TrainResult(model=m, log=log, final_checkpoint=last_ckpt,
                       dropped_overlong=dropped)


def write_loss_log(path: str | Path, log: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# model checkpoints and teacher construction


def save_model(path: str | Path, m: RoleAlternatingModel,
               meta: dict | None = None) -> None:
    save_checkpoint(path, m.params(),
                    {"model_config": m.config.as_dict(), **(meta or {})})


def load_model(path: str | Path) -> tuple[RoleAlternatingModel, dict]:
    arrays, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks a model_config")
    config = ModelConfig(**meta["model_config"])
    lms = {}
    for side in ("user_lm", "system_lm"):
        prefix = side + "."
        params = {name[len(prefix):]: Tensor(arr, requires_grad=True,
                                             name=name[len(prefix):])
                  for name, arr in arrays.items() if name.startswith(prefix)}
        if not params:
            raise ConfigError(f"{path}: checkpoint lacks {side} parameters")
        lms[side] = TransformerLM(config, params)
    return RoleAlternatingModel(lms["user_lm"], lms["system_lm"]), meta


def load_teacher(path: str | Path) -> TeacherPair:
    m, _ = load_model(path)
    return TeacherPair(user=TeacherHandle(m.user_lm),
                       system=TeacherHandle(m.system_lm))


def teacher_config(vocab_size: int, max_positions: int = 256) -> ModelConfig:
    """Wider and deeper than the desk default; the distillation reference."""
    return ModelConfig(n_layers=3, n_heads=6, d_model=192, d_ff=768,
                       vocab_size=vocab_size, max_positions=max_positions)


def make_teacher(corpus: Sequence[TokenizedDialog], config: ModelConfig,
                 seed: int, total_steps: int, out_path: str | Path,
                 batch_size: int = 8,
                 learning_rate: float = 3e-4) -> RoleAlternatingModel:
    """Pretrain an LM pair as a frozen reference and write its checkpoint.

    Plain LM training (no discount, no teacher); start positions are
    randomized so every position row the students may query is trained.
    """
    model = RoleAlternatingModel.init(
        replace(config, init_seed=derive_seed(seed, "teacher_init")))
    cfg = TrainConfig(total_steps=total_steps, seed=derive_seed(seed, "teacher"),
                      learning_rate=learning_rate, batch_size=batch_size,
                      spr_enabled=True, teacher_enabled=False,
                      discount_enabled=False)
    train(corpus, model, None, cfg)
    save_model(out_path, model, {"kind": "teacher"})
    return model
