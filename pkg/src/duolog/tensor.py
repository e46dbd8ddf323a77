"""Dense tensors with taped reverse-mode gradients.

numpy supplies the dense arithmetic; this module supplies the gradient
machinery: a ``Tensor`` wrapper, a ``GradientTape`` that records every
differentiable operation in execution order, and the operation set needed
to train a small decoder-only transformer (matmul, layer norm, softmax,
GELU, embedding gather, fused cross-entropy and KL losses).

Float32 is the working precision; every op also runs in float64, which is
what the finite-difference gradient checks use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TokenIndexError

DEFAULT_DTYPE = np.float32

# Additive pre-softmax mask value for disallowed attention positions.
MASK_VALUE = -1e9


class Tensor:
    """A dense array plus an optional gradient buffer.

    ``requires_grad`` marks trainable leaves; it propagates to results of
    operations so the tape only records what can reach a parameter.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def grad_array(self) -> np.ndarray:
        """The accumulated gradient, materialized as zeros if untouched."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None,
           dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


# The single active tape. Ops record onto it when an input requires grad.
_ACTIVE_TAPE: "GradientTape | None" = None


class GradientTape:
    """Records operations in execution order for one backward replay.

    Execution order is already a topological order of the graph, so the
    backward pass just walks the record in reverse, skipping ops whose
    output never received a gradient. Parameters untouched by the taped
    computation keep a zero gradient (see ``Tensor.grad_array``).
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[], None]]] = []
        self._used = False

    def __enter__(self) -> "GradientTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradientTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Seed ``loss`` with gradient 1 and replay adjoints in reverse."""
        if self._used:
            raise RuntimeError("tape already replayed")
        self._used = True
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        _accumulate(loss, np.ones_like(loss.data))
        for out, backward_fn in reversed(self._ops):
            if out.grad is not None:
                backward_fn()


def _record(out: Tensor, backward_fn: Callable[[], None]) -> None:
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._ops.append((out, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)

    def backward():
        _accumulate(a, out.grad * s)

    _record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    _record(out, backward)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy(), requires_grad=a.requires_grad)

    def backward():
        _accumulate(a, out.grad.T)

    _record(out, backward)
    return out


def rows(a: Tensor, start: int, end: int) -> Tensor:
    """Contiguous row slice ``a[start:end]``."""
    out = Tensor(a.data[start:end].copy(), requires_grad=a.requires_grad)

    def backward():
        g = np.zeros_like(a.data)
        g[start:end] = out.grad
        _accumulate(a, g)

    _record(out, backward)
    return out


def cols(a: Tensor, start: int, end: int) -> Tensor:
    """Contiguous column slice ``a[:, start:end]``."""
    out = Tensor(a.data[:, start:end].copy(), requires_grad=a.requires_grad)

    def backward():
        g = np.zeros_like(a.data)
        g[:, start:end] = out.grad
        _accumulate(a, g)

    _record(out, backward)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 requires_grad=any(p.requires_grad for p in parts))
    widths = [p.data.shape[1] for p in parts]

    def backward():
        g = out.grad
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accumulate(p, g[:, offset:offset + w])
            offset += w

    _record(out, backward)
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise TokenIndexError(f"row index out of range [0, {n}) in gather")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accumulate(table, g)

    _record(out, backward)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi), kept as a Python float to preserve dtype


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation used by GPT-style blocks."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), requires_grad=a.requires_grad)

    def backward():
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _accumulate(a, out.grad * local)

    _record(out, backward)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the same mask scales the gradient."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = Tensor(a.data * keep, requires_grad=a.requires_grad)

    def backward():
        _accumulate(a, out.grad * keep)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization and softmax


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization over the last axis."""
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = Tensor(x_hat * gain.data + bias.data,
                 requires_grad=a.requires_grad or gain.requires_grad or bias.requires_grad)

    def backward():
        g = out.grad
        d = x.shape[-1]
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * x_hat, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
        if a.requires_grad:
            gy = g * gain.data
            term1 = gy
            term2 = gy.mean(axis=-1, keepdims=True)
            term3 = x_hat * (gy * x_hat).mean(axis=-1, keepdims=True)
            _accumulate(a, (term1 - term2 - term3) * inv_std)

    _record(out, backward)
    return out


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if a.data.ndim < 1 or a.data.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {a.shape}")
    y = _stable_softmax(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * y)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# fused losses


def cross_entropy(logits: Tensor, target_ids, mask) -> Tensor:
    """Per-position ``-log softmax(logits)[target]``, zero where masked.

    ``logits`` is (T, V); ``target_ids`` and ``mask`` have length T. The
    result is a length-T vector so callers can apply their own weighting.
    """
    targets = np.asarray(target_ids, dtype=np.int64)
    m = np.asarray(mask, dtype=logits.data.dtype)
    t_count, vocab = logits.data.shape
    if targets.shape != (t_count,) or m.shape != (t_count,):
        raise ShapeError(
            f"cross_entropy alignment: logits {logits.shape}, targets "
            f"{targets.shape}, mask {m.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f"target id out of vocabulary range [0, {vocab})")

    log_probs = _log_softmax(logits.data)
    per_pos = -log_probs[np.arange(t_count), targets] * m
    out = Tensor(per_pos, requires_grad=logits.requires_grad)

    def backward():
        g = (out.grad * m)[:, None]
        soft = np.exp(log_probs)
        soft[np.arange(t_count), targets] -= 1.0
        _accumulate(logits, soft * g)

    _record(out, backward)
    return out


def kl_divergence_rows(p_logits: Tensor, q_logits: Tensor, mask,
                       direction: str = "p_to_q") -> Tensor:
    """Mean per-unmasked-row KL between row softmaxes of two logit sets.

    ``p_to_q`` computes KL(softmax(p) || softmax(q)); ``q_to_p`` the
    reverse. Internally float64 so the result is never visibly negative.
    Returns 0 when the mask is all zero.
    """
    if p_logits.data.shape != q_logits.data.shape:
        raise ShapeError(
            f"kl_divergence_rows shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    if direction not in ("p_to_q", "q_to_p"):
        raise ShapeError(f"unknown KL direction {direction!r}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != p_logits.data.shape[:-1]:
        raise ShapeError(
            f"kl mask shape {m.shape} does not align with rows {p_logits.data.shape[:-1]}")
    n_rows = float(m.sum())
    dtype = p_logits.data.dtype
    if n_rows == 0.0:
        return Tensor(np.zeros((), dtype=dtype))

    lp = _log_softmax(p_logits.data.astype(np.float64))
    lq = _log_softmax(q_logits.data.astype(np.float64))
    p = np.exp(lp)
    q = np.exp(lq)
    if direction == "p_to_q":
        per_row = (p * (lp - lq)).sum(axis=-1)
    else:
        per_row = (q * (lq - lp)).sum(axis=-1)
    value = (per_row * m).sum() / n_rows
    out = Tensor(np.asarray(value, dtype=dtype),
                 requires_grad=p_logits.requires_grad or q_logits.requires_grad)

    def backward():
        g = float(out.grad.reshape(())) / n_rows
        w = (m * g)[..., None]
        if direction == "p_to_q":
            dp = p * ((lp - lq) - per_row[..., None])
            dq = q - p
        else:
            dp = p - q
            dq = q * ((lq - lp) - per_row[..., None])
        if p_logits.requires_grad:
            _accumulate(p_logits, (dp * w).astype(dtype))
        if q_logits.requires_grad:
            _accumulate(q_logits, (dq * w).astype(dtype))

    _record(out, backward)
    return out


def weighted_sum(vec: Tensor, weights) -> Tensor:
    """Dot product of a vector with constant weights, as a scalar tensor."""
    w = np.asarray(weights, dtype=vec.data.dtype)
    if w.shape != vec.data.shape:
        raise ShapeError(f"weighted_sum shapes disagree: {vec.shape} vs {w.shape}")
    out = Tensor(np.asarray((vec.data * w).sum(), dtype=vec.data.dtype),
                 requires_grad=vec.requires_grad)

    def backward():
        _accumulate(vec, w * float(out.grad.reshape(())))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# finite differences, the gradient oracle for tests


def finite_difference(f: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``wrt``.

    ``f`` must recompute the scalar from current tensor contents; ``wrt``
    should be float64 for the documented accuracy.
    """
    base = wrt.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
