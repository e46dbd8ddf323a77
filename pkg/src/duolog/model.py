"""Decoder-only transformer LM and the two-model role-alternating composite.

GPT-2 family conventions: learned positional embeddings, pre-layer-norm
blocks, GELU feed-forward, output projection tied to the token
embedding, N(0, 0.02^2) weight init. The composite holds one LM per
role with fully disjoint parameters; each conditions on the whole token
history and is penalized only on its own role's spans.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bpe import TokenizedDialog
from .corpus import Role
from .errors import CapacityError, ConfigError, ShapeError
from .seeding import derive_seed
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_positions: int = 1024
    dropout_rate: float = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff,
               self.vocab_size) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @staticmethod
    def desk(vocab_size: int, **overrides) -> "ModelConfig":
        cfg = ModelConfig(n_layers=2, n_heads=4, d_model=128, d_ff=512,
                          vocab_size=vocab_size, max_positions=256)
        return replace(cfg, **overrides) if overrides else cfg

    def as_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "d_model": self.d_model, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "max_positions": self.max_positions,
            "dropout_rate": self.dropout_rate, "init_seed": self.init_seed,
        }


class TransformerLM:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def cast(self, dtype) -> "TransformerLM":
        return TransformerLM(self.config, {
            name: Tensor(p.data.astype(dtype), requires_grad=True, name=p.name)
            for name, p in self.params.items()})

    def forward(self, ids, position_offset: int = 0, train: bool = False,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Causal logits for every position; row t sees ids[0..t] only."""
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("ids must be a nonempty 1-D sequence")
        n = ids.size
        if position_offset < 0:
            raise CapacityError("position_offset must be nonnegative")
        if n + position_offset > cfg.max_positions:
            raise CapacityError(
                f"sequence of {n} tokens at offset {position_offset} exceeds "
                f"max_positions {cfg.max_positions}")
        p = self.params
        drop = cfg.dropout_rate if train else 0.0
        if drop > 0.0 and dropout_rng is None:
            raise ConfigError("training-mode forward needs a dropout rng")

        def dropped(x: Tensor) -> Tensor:
            return T.dropout(x, drop, dropout_rng) if drop > 0.0 else x

        positions = np.arange(position_offset, position_offset + n, dtype=np.int64)
        x = dropped(T.add(T.gather_rows(p["wte"], ids),
                          T.gather_rows(p["wpe"], positions)))

        dh = cfg.d_model // cfg.n_heads
        att_scale = 1.0 / float(np.sqrt(dh))
        dtype = p["wte"].data.dtype
        causal = Tensor(np.triu(np.full((n, n), T.MASK_VALUE, dtype=dtype), k=1),
                        requires_grad=False)

        for i in range(cfg.n_layers):
            pre = f"h{i}."
            a = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = T.add(T.matmul(a, p[pre + "attn.wq"]), p[pre + "attn.bq"])
            k = T.add(T.matmul(a, p[pre + "attn.wk"]), p[pre + "attn.bk"])
            v = T.add(T.matmul(a, p[pre + "attn.wv"]), p[pre + "attn.bv"])
            heads = []
            for h in range(cfg.n_heads):
                lo, hi = h * dh, (h + 1) * dh
                qh, kh, vh = T.cols(q, lo, hi), T.cols(k, lo, hi), T.cols(v, lo, hi)
                scores = T.add(T.scale(T.matmul(qh, T.transpose(kh)), att_scale),
                               causal)
                probs = dropped(T.softmax_rows(scores))
                heads.append(T.matmul(probs, vh))
            merged = heads[0] if len(heads) == 1 else T.concat_cols(heads)
            attn_out = dropped(T.add(T.matmul(merged, p[pre + "attn.wo"]),
                                     p[pre + "attn.bo"]))
            x = T.add(x, attn_out)

            a = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            hidden = T.gelu(T.add(T.matmul(a, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
            mlp_out = dropped(T.add(T.matmul(hidden, p[pre + "mlp.w2"]),
                                    p[pre + "mlp.b2"]))
            x = T.add(x, mlp_out)

        x = T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return T.matmul(x, T.transpose(p["wte"]))  # tied output projection


def lm_init(config: ModelConfig) -> TransformerLM:
    """Deterministic GPT-2-style initialization from config.init_seed."""
    rng = np.random.default_rng(config.init_seed)
    d, ff, v, pos = (config.d_model, config.d_ff, config.vocab_size,
                     config.max_positions)

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(T.DEFAULT_DTYPE)

    def zeros(*shape):
        return np.zeros(shape, dtype=T.DEFAULT_DTYPE)

    def ones(*shape):
        return np.ones(shape, dtype=T.DEFAULT_DTYPE)

    spec: list[tuple[str, np.ndarray]] = [("wte", normal(v, d)),
                                          ("wpe", normal(pos, d))]
    for i in range(config.n_layers):
        pre = f"h{i}."
        spec += [
            (pre + "ln1.g", ones(1, d)), (pre + "ln1.b", zeros(1, d)),
            (pre + "attn.wq", normal(d, d)), (pre + "attn.bq", zeros(1, d)),
            (pre + "attn.wk", normal(d, d)), (pre + "attn.bk", zeros(1, d)),
            (pre + "attn.wv", normal(d, d)), (pre + "attn.bv", zeros(1, d)),
            (pre + "attn.wo", normal(d, d)), (pre + "attn.bo", zeros(1, d)),
            (pre + "ln2.g", ones(1, d)), (pre + "ln2.b", zeros(1, d)),
            (pre + "mlp.w1", normal(d, ff)), (pre + "mlp.b1", zeros(1, ff)),
            (pre + "mlp.w2", normal(ff, d)), (pre + "mlp.b2", zeros(1, d)),
        ]
    spec += [("ln_f.g", ones(1, d)), ("ln_f.b", zeros(1, d))]
    params = {name: Tensor(arr, requires_grad=True, name=name)
              for name, arr in spec}
    return TransformerLM(config, params)


class RoleAlternatingModel:
    """p_u and p_s as two independent LMs over a shared vocabulary."""

    def __init__(self, user_lm: TransformerLM, system_lm: TransformerLM):
        if user_lm.config.vocab_size != system_lm.config.vocab_size:
            raise ConfigError("role models must share a vocabulary size")
        self.user_lm = user_lm
        self.system_lm = system_lm

    @staticmethod
    def init(config: ModelConfig) -> "RoleAlternatingModel":
        user_cfg = replace(config, init_seed=derive_seed(config.init_seed, "user_lm"))
        system_cfg = replace(config,
                             init_seed=derive_seed(config.init_seed, "system_lm"))
        return RoleAlternatingModel(lm_init(user_cfg), lm_init(system_cfg))

    @property
    def config(self) -> ModelConfig:
        return self.user_lm.config

    def lm_for(self, role: Role) -> TransformerLM:
        return self.user_lm if role is Role.USER else self.system_lm

    def params(self) -> dict[str, Tensor]:
        out = {f"user_lm.{k}": p for k, p in self.user_lm.params.items()}
        out.update({f"system_lm.{k}": p for k, p in self.system_lm.params.items()})
        return out

    def cast(self, dtype) -> "RoleAlternatingModel":
        return RoleAlternatingModel(self.user_lm.cast(dtype),
                                    self.system_lm.cast(dtype))


def dialog_logits(m: RoleAlternatingModel, td: TokenizedDialog,
                  offset_user: int = 0, offset_system: int = 0,
                  train: bool = False,
                  dropout_rng: np.random.Generator | None = None
                  ) -> tuple[Tensor, Tensor]:
    """Both models' logits over the full id sequence."""
    user_logits = m.user_lm.forward(td.ids, offset_user, train, dropout_rng)
    system_logits = m.system_lm.forward(td.ids, offset_system, train, dropout_rng)
    return user_logits, system_logits


# ---------------------------------------------------------------------------
# start-position randomization


class PositionSampler:
    def __init__(self, max_positions: int, seed: int):
        self.max_positions = max_positions
        self.rng = np.random.default_rng(seed)

    def sample_offset(self, L: int) -> int:
        if L > self.max_positions:
            raise CapacityError(
                f"sequence length {L} exceeds max_positions {self.max_positions}")
        if L < 1:
            raise CapacityError("sequence length must be positive")
        return int(self.rng.integers(0, self.max_positions - L + 1))


def sample_offset(s: PositionSampler, L: int) -> int:
    return s.sample_offset(L)


# ---------------------------------------------------------------------------
# role masks over token positions


def token_span_u(td: TokenizedDialog) -> np.ndarray:
    """1-based utterance index of every token position."""
    out = np.empty(len(td.ids), dtype=np.int64)
    for span in td.utterance_spans:
        out[span.start:span.end] = span.u
    return out


def token_is_user(td: TokenizedDialog) -> np.ndarray:
    out = np.empty(len(td.ids), dtype=bool)
    for span in td.utterance_spans:
        out[span.start:span.end] = span.role is Role.USER
    return out


def target_mask(td: TokenizedDialog, role: Role) -> np.ndarray:
    """Float mask over predictor positions 0..N-2.

    Position t predicts token t+1; the mask selects predictions whose
    target token lies inside one of the given role's spans.
    """
    is_user = token_is_user(td)
    owned_targets = is_user[1:] if role is Role.USER else ~is_user[1:]
    return owned_targets.astype(np.float64)
