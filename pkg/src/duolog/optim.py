"""Adaptive-moment optimizer with decoupled weight decay and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteGradientError, ShapeError
from .tensor import Tensor


@dataclass
class AdamW:
    """Per-parameter moment state plus the update rule.

    The effective learning rate ramps linearly from 0 to ``lr`` over
    ``warmup_steps`` (step counting starts at 1, so the first update uses
    ``lr / warmup_steps``) and stays constant after, unless
    ``after_warmup="linear"`` decays it to 0 at ``total_steps``.
    Weight decay is decoupled: applied to parameters directly, never to
    the moment accumulators.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    after_warmup: str = "constant"
    total_steps: int | None = None
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.after_warmup not in ("constant", "linear"):
            raise ConfigError(f"unknown after-warmup schedule {self.after_warmup!r}")
        if self.after_warmup == "linear" and not self.total_steps:
            raise ConfigError("linear decay needs total_steps")

    def effective_lr(self, step: int) -> float:
        """Learning rate used at 1-based ``step``."""
        ramp = 1.0 if self.warmup_steps <= 0 else min(1.0, step / self.warmup_steps)
        if self.after_warmup == "linear" and step > self.warmup_steps:
            span = max(1, self.total_steps - self.warmup_steps)
            ramp *= max(0.0, 1.0 - (step - self.warmup_steps) / span)
        return self.lr * ramp

    def step(self, params: dict[str, Tensor]) -> float:
        """Apply one update from the gradients stored on ``params``.

        Returns the effective learning rate that was used. Raises
        ``NonFiniteGradientError`` naming the first bad parameter, leaving
        all parameters untouched in that case.
        """
        for name, p in params.items():
            g = p.grad_array()
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(name)

        self.step_count += 1
        t = self.step_count
        lr_t = self.effective_lr(t)
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad_array()
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (lr_t * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)).astype(p.data.dtype)
        return lr_t

    def zero_grad(self, params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.zero_grad()
