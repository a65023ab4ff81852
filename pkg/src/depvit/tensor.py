"""Dense tensor kernels with a hand-written reverse-mode tape.

Arrays are numpy float32 or float64; the dtype is a per-tensor property and
mixed-precision arithmetic is rejected rather than silently promoted.  Every
kernel validates shapes before computing and checks the result for NaN/Inf
after.  When a Tape is active, kernels append a closure that maps the output
gradient to input gradients; Tape.gradients replays those closures in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, UsageError

_ALLOWED_DTYPES = (np.float32, np.float64)
_DT32 = np.dtype(np.float32)
_DT64 = np.dtype(np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A numpy array plus a grad-participation flag.

    The array is owned by the tensor; kernels never alias their inputs into
    outputs, so mutating ``t.data`` between forward and backward corrupts
    gradients only for that tensor (optimizers rely on in-place updates
    happening outside any active tape).
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        if arr.dtype is not _DT32 and arr.dtype is not _DT64 \
                and arr.dtype not in (_DT32, _DT64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


_CURRENT_TAPE: "Tape | None" = None


@dataclass
class _Record:
    # Holds a reference to the output so its id() stays unique for the tape's
    # whole lifetime (python reuses ids of collected objects).
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Records kernel calls so gradients can be replayed in reverse order.

    Use as a context manager around the forward computation.  Tapes do not
    nest; a second concurrent tape is a usage error.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        global _CURRENT_TAPE
        if _CURRENT_TAPE is not None:
            raise UsageError("a tape is already active; tapes do not nest")
        _CURRENT_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _CURRENT_TAPE
        _CURRENT_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to each tensor in ``wrt``.

        Tensors that never influenced the loss get an all-zero gradient of
        their own shape.  The tape may be replayed multiple times.
        """
        if loss.data.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        acc: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for rec in reversed(self._records):
            out_grad = acc.get(id(rec.out))
            if out_grad is None:
                continue
            in_grads = rec.backward(out_grad)
            for tin, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                prev = acc.get(id(tin))
                if prev is None:
                    acc[id(tin)] = g.copy() if g.base is not None else g
                else:
                    acc[id(tin)] = prev + g
        out = []
        for t in wrt:
            g = acc.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False))
        return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _CURRENT_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append(_Record(out, inputs, backward))
    return out


_reduce_sum = np.add.reduce
_isfinite = math.isfinite


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One fused reduction: any NaN/Inf forces a non-finite sum.  Only on a
    # non-finite sum (which finite values can also cause by overflowing) is
    # the exact elementwise scan run to decide.
    if not _isfinite(_reduce_sum(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _same_dtype(op: str, *tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt.name} and {t.dtype.name}")
    return dt


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def tensor(data, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Construct a tensor, validating finiteness of the initial data."""
    t = Tensor(data, dtype=dtype, requires_grad=requires_grad)
    _check_finite(t.data, "tensor")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.data.dtype is not b.data.dtype:
        _same_dtype("matmul", a, b)
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul")
    out = Tensor(out_data)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    if a.data.dtype is not b.data.dtype:
        _same_dtype("add", a, b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    _check_finite(out_data, "add")
    out = Tensor(out_data)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    if a.data.dtype is not b.data.dtype:
        _same_dtype("mul", a, b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    _check_finite(out_data, "mul")
    out = Tensor(out_data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient with numpy broadcasting."""
    if a.data.dtype is not b.data.dtype:
        _same_dtype("div", a, b)
    try:
        out_data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from exc
    _check_finite(out_data, "div")
    out = Tensor(out_data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (scalar is not differentiated)."""
    s = float(s)
    out_data = a.data * a.dtype.type(s)
    _check_finite(out_data, "scale")
    out = Tensor(out_data)

    def backward(g):
        return (g * s if a.requires_grad else None,)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """View with a new shape (same element count, row-major order)."""
    try:
        out_data = a.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    out = Tensor(out_data)

    def backward(g):
        return (g.reshape(a.shape) if a.requires_grad else None,)

    return _record(out, (a,), backward)


def transpose_last2(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last2 needs ndim >= 2, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2).copy())

    def backward(g):
        return (np.swapaxes(g, -1, -2) if a.requires_grad else None,)

    return _record(out, (a,), backward)


def sum_over_axis(a: Tensor, axis: int) -> Tensor:
    """Sum along one axis (axis removed from the result)."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"sum_over_axis: axis {axis} out of range for {a.shape}")
    axis = axis % a.data.ndim
    out_data = a.data.sum(axis=axis)
    _check_finite(out_data, "sum_over_axis")
    out = Tensor(out_data)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, returned as a 0-d tensor."""
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)
    _check_finite(out_data, "sum_all")
    out = Tensor(out_data)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def sum_squares(a: Tensor) -> Tensor:
    """Sum of squared elements as a 0-d tensor; gradient is 2x."""
    x = a.data
    out_data = np.asarray((x * x).sum(), dtype=a.dtype)
    _check_finite(out_data, "sum_squares")
    out = Tensor(out_data)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (2.0 * g * x,)

    return _record(out, (a,), backward)


def weighted_mean_rows(tokens: Tensor, weights: Tensor) -> Tensor:
    """Weighted average of the rows: sum_i w_i x_i / sum_i w_i, shape (C,).

    The weight total must be nonzero; gradients fall out of the quotient
    rule, with d/dw_i = (x_i - out) . g / total.
    """
    if tokens.data.ndim != 2:
        raise ShapeError(f"weighted_mean_rows expects (rows, channels), got {tokens.shape}")
    n = tokens.shape[0]
    if weights.shape != (n,):
        raise ShapeError(f"weighted_mean_rows: weights shape {weights.shape} != ({n},)")
    _same_dtype("weighted_mean_rows", tokens, weights)
    x, w = tokens.data, weights.data
    total = w.sum()
    if total == 0.0:
        raise NumericError("weighted_mean_rows: weights sum to zero")
    out_data = (w @ x) / total
    _check_finite(out_data, "weighted_mean_rows")
    out = Tensor(out_data)

    def backward(g):
        gx = np.outer(w, g) / total if tokens.requires_grad else None
        gw = ((x - out_data) @ g) / total if weights.requires_grad else None
        return gx, gw

    return _record(out, (tokens, weights), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    n = a.shape[-1]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_last: [{start}:{stop}] invalid for last dim {n}")
    out = Tensor(a.data[..., start:stop].copy())

    def backward(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (a,), backward)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise UsageError("concat_last: empty sequence")
    _same_dtype("concat_last", *parts)
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading dims differ: {parts[0].shape} vs {p.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    out = Tensor(out_data)
    widths = [p.shape[-1] for p in parts]

    def backward(g):
        grads = []
        ofs = 0
        for p, w in zip(parts, widths):
            grads.append(g[..., ofs:ofs + w].copy() if p.requires_grad else None)
            ofs += w
        return tuple(grads)

    return _record(out, tuple(parts), backward)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"batched_matmul expects ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched_matmul batch dims differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched_matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.data.dtype is not b.data.dtype:
        _same_dtype("batched_matmul", a, b)
    out_data = a.data @ b.data
    _check_finite(out_data, "batched_matmul")
    out = Tensor(out_data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def split_heads(a: Tensor, heads: int) -> Tensor:
    """(N, C) -> (heads, N, C/heads), head h owning column block h."""
    if a.data.ndim != 2:
        raise ShapeError(f"split_heads expects (tokens, channels), got {a.shape}")
    n, c = a.shape
    if heads < 1 or c % heads != 0:
        raise ShapeError(f"split_heads: {c} channels not divisible into {heads} heads")
    out = Tensor(a.data.reshape(n, heads, c // heads).swapaxes(0, 1).copy())

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (np.ascontiguousarray(g.swapaxes(0, 1)).reshape(n, c),)

    return _record(out, (a,), backward)


def merge_heads(a: Tensor) -> Tensor:
    """(heads, N, d) -> (N, heads*d), inverse of split_heads."""
    if a.data.ndim != 3:
        raise ShapeError(f"merge_heads expects (heads, tokens, width), got {a.shape}")
    h, n, d = a.shape
    out = Tensor(np.ascontiguousarray(a.data.swapaxes(0, 1)).reshape(n, h * d))

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (g.reshape(n, h, d).swapaxes(0, 1).copy(),)

    return _record(out, (a,), backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by integer index; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if a.data.ndim < 1:
        raise ShapeError("gather_rows: operand must have at least one axis")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    out = Tensor(a.data[idx].copy())

    def backward(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), backward)


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax over the last axis: softmax(x / temperature).

    Uses the max-shift form so large logits stay finite.
    """
    if temperature <= 0:
        raise UsageError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / a.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)
    _check_finite(out_data, "softmax_rows")
    out = Tensor(out_data)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        y = out_data
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _record(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = (x * phi).astype(a.dtype, copy=False)
    _check_finite(out_data, "gelu")
    out = Tensor(out_data)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, numerically stable for both signs."""
    x = a.data
    # exp of a non-positive argument never overflows; the two branches are
    # the same function written for the sign that keeps the exponent <= 0
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    _check_finite(out_data, "sigmoid")
    out = Tensor(out_data)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (g * out_data * (1.0 - out_data),)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    _same_dtype("layer_norm", a, gain, bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    _check_finite(out_data, "layer_norm")
    out = Tensor(out_data)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        if a.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            gx = (gy - m1 - xhat * m2) * inv
        else:
            gx = None
        return gx, ggain, gbias

    return _record(out, (a, gain, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"cross_entropy: label out of range [0, {k})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m.squeeze(-1) + np.log(np.exp(x - m).sum(axis=-1))
    nll = lse - x[np.arange(b), labels]
    out_data = np.asarray(nll.mean(), dtype=logits.dtype)
    _check_finite(out_data, "cross_entropy")
    out = Tensor(out_data)

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return _record(out, (logits,), backward)


def cumulative_product(factors: Sequence[Tensor]) -> list[Tensor]:
    """Running elementwise products: out[i] = factors[0] * ... * factors[i]."""
    if not factors:
        raise UsageError("cumulative_product: empty sequence")
    outs = [factors[0]]
    for f in factors[1:]:
        outs.append(mul(outs[-1], f))
    return outs


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples clipped to two sigmas by resampling, then scaled by std."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


@dataclass
class GradCheckReport:
    """Result of comparing tape gradients against central differences."""

    max_rel_error: float
    per_input: list[float]
    tolerance: float
    step: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_error <= self.tolerance)


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(inputs)`` to central differences.

    All inputs must be float64; the finite-difference step must lie in
    [1e-6, 1e-4].  The error for one input is
    ||g - fd||_2 / max(||g||_2 + ||fd||_2, 1e-12) and the report carries the
    maximum over inputs.
    """
    if not (1e-6 <= step <= 1e-4):
        raise UsageError(f"finite-difference step {step} outside [1e-6, 1e-4]")
    for t in inputs:
        if t.dtype != np.float64:
            raise UsageError("grad_check requires float64 inputs")
        t.requires_grad = True

    with Tape() as tape:
        loss = fn(inputs)
    if loss.data.size != 1:
        raise UsageError("grad_check: fn must return a scalar")
    grads = tape.gradients(loss, inputs)

    errors: list[float] = []
    for t, g in zip(inputs, grads):
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(inputs).item()
            flat[i] = orig - step
            lo = fn(inputs).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        num = float(np.linalg.norm(g - fd))
        den = max(float(np.linalg.norm(g)) + float(np.linalg.norm(fd)), 1e-12)
        errors.append(num / den)
    worst = max(errors) if errors else 0.0
    return GradCheckReport(max_rel_error=worst, per_input=errors, tolerance=tolerance, step=step)
