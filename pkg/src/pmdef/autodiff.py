"""numpy-backed dense tensors with reverse-mode autodiff on an explicit tape.

Everything runs in float64. Ops record onto the innermost active ``Tape``
only when an input requires gradients, so inference pays no bookkeeping.
The primitive set is deliberately small: just enough for little dense and
convolutional networks, distribution-matching losses and input-gradient
attacks. Every forward output is checked for NaN/Inf; overflow raises
instead of propagating silently.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EvaluationError,
    NonFiniteError,
    ParameterError,
    ValidationError,
)

Array = np.ndarray

KL_CLAMP = 1e-12          # lower clamp applied inside the KL log
STD_FLOOR = 1e-6          # per-image standardization std floor
_REL_FLOOR = 1e-8         # denominator floor for relative errors


class Tensor:
    """A dense float64 array with a gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _TapeRecord:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops, in forward (hence topological) order.

    Single-owner: build the graph under ``with Tape() as tape`` and run
    ``backward(tape, loss)`` once. Tapes nest; ops record onto the innermost
    one. ``kink_margins`` collects, per nonsmooth op, the distance of its
    inputs to the nearest nondifferentiable point, which lets finite
    difference harnesses reject samples too close to a kink.
    """

    def __init__(self):
        self.records: list[_TapeRecord] = []
        self.kink_margins: list[float] = []
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def watch(self, tensor: Tensor) -> None:
        """Register a leaf so backward() reports its gradient even if unused."""
        tensor.requires_grad = True
        self._watched[id(tensor)] = tensor

    def min_kink_margin(self) -> float:
        return min(self.kink_margins, default=math.inf)


def _check_finite(op: str, data: Array) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: Array, vjp, kink: float | None = None) -> Tensor:
    out = Tensor(out_data)
    _check_finite(op, out.data)
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    tape = _active_tape()
    if tape is not None and needs:
        if kink is not None:
            tape.kink_margins.append(float(kink))
        tape.records.append(_TapeRecord(op, inputs, out, vjp))
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _trailing_axes(a: Tensor, b: Tensor) -> tuple[int, ...]:
    """Axes summed to undo bias-style broadcasting of b over a's batch dims."""
    if a.shape == b.shape:
        return ()
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return tuple(range(a.ndim - b.ndim))
    raise DimensionError(f"shapes do not align for elementwise op: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _trailing_axes(a, b)

    def vjp(g):
        return g, g.sum(axis=axes) if axes else g

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    axes = _trailing_axes(a, b)

    def vjp(g):
        return g, -(g.sum(axis=axes) if axes else g)

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul requires identical shapes: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _emit("mul", (a, b), ad * bd, vjp)


def neg(t: Tensor) -> Tensor:
    return _emit("neg", (t,), -t.data, lambda g: (-g,))


def add_scalar(t: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", (t,), t.data + c, lambda g: (g,))


def mul_scalar(t: Tensor, c: float) -> Tensor:
    return _emit("mul_scalar", (t,), t.data * c, lambda g: (g * c,))


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if int(np.prod(shape)) != t.size:
        raise DimensionError(f"cannot reshape {t.shape} (size {t.size}) to {shape}")
    old = t.shape

    def vjp(g):
        return (g.reshape(old),)

    return _emit("reshape", (t,), t.data.reshape(shape), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, vjp)


def relu(t: Tensor) -> Tensor:
    d = t.data
    mask = d > 0.0
    kink = float(np.abs(d).min()) if d.size else math.inf

    def vjp(g):
        return (g * mask,)

    return _emit("relu", (t,), np.where(mask, d, 0.0), vjp, kink=kink)


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _emit("tanh", (t,), y, vjp)


def log(t: Tensor) -> Tensor:
    d = t.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(d)

    def vjp(g):
        return (g / d,)

    return _emit("log", (t,), y, vjp)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ParameterError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
    d = t.data
    mask = (d >= lo) & (d <= hi)
    kink = float(min(np.abs(d - lo).min(), np.abs(d - hi).min())) if d.size else math.inf

    def vjp(g):
        return (g * mask,)

    return _emit("clip", (t,), np.clip(d, lo, hi), vjp, kink=kink)


def maximum_scalar(t: Tensor, c: float) -> Tensor:
    d = t.data
    mask = d >= c
    kink = float(np.abs(d - c).min()) if d.size else math.inf

    def vjp(g):
        return (g * mask,)

    return _emit("maximum_scalar", (t,), np.maximum(d, c), vjp, kink=kink)


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (t,), np.asarray(t.data.sum()), vjp)


def mean_all(t: Tensor) -> Tensor:
    shape = t.shape
    n = max(t.size, 1)

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", (t,), np.asarray(t.data.mean()), vjp)


def take_per_row(t: Tensor, idx) -> Tensor:
    """Pick t[i, idx[i]] for every row i."""
    if t.ndim != 2:
        raise DimensionError(f"take_per_row expects a 2-d tensor, got {t.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (t.shape[0],):
        raise DimensionError(f"index vector of length {t.shape[0]} required, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[1]):
        raise ValidationError(f"row indices out of range [0, {t.shape[1]})")
    rows = np.arange(t.shape[0])
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _emit("take_per_row", (t,), t.data[rows, idx], vjp)


def rowmax(t: Tensor) -> Tensor:
    """Per-row maximum over the last axis of a 2-d tensor; ties take the first column."""
    if t.ndim != 2:
        raise DimensionError(f"rowmax expects a 2-d tensor, got {t.shape}")
    d = t.data
    arg = d.argmax(axis=1)
    rows = np.arange(d.shape[0])
    kink = math.inf
    if d.shape[1] >= 2:
        part = np.partition(d, d.shape[1] - 2, axis=1)
        kink = float((part[:, -1] - part[:, -2]).min())
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, arg] = g
        return (out,)

    return _emit("rowmax", (t,), d[rows, arg], vjp, kink=kink)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    d = t.data
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax", (t,), y, vjp)


def logsumexp(t: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, computed stably."""
    d = t.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    s = e.sum(axis=-1, keepdims=True)
    y = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def vjp(g):
        return (np.expand_dims(g, -1) * soft,)

    return _emit("logsumexp", (t,), y, vjp)


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return t
    keep = rng.random(t.shape) >= rate
    scale = 1.0 / (1.0 - rate)

    def vjp(g):
        return (g * keep * scale,)

    return _emit("dropout", (t,), t.data * keep * scale, vjp)


# ---------------------------------------------------------------------------
# spatial primitives (layout: batch-first NHWC, row-major)


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w} (valid padding)")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        return oh, ow, 0, 0, 0, 0
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        return oh, ow, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    raise ParameterError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Strided cross-correlation of an NHWC batch with [kh, kw, c_in, c_out] filters."""
    if x.ndim != 4 or filters.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and 4-d filters, got {x.shape} and {filters.shape}")
    if x.shape[3] != filters.shape[2]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs filters {filters.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"stride must be a positive int, got {stride}")
    n, h, w, _ = x.shape
    kh, kw, cin, cout = filters.shape
    oh, ow, pt, pb, pl, pr = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    wd = filters.data

    out = np.zeros((n, oh, ow, cout))
    views = []
    for i in range(kh):
        for j in range(kw):
            v = xp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride, :]
            views.append(v)
            out += np.tensordot(v, wd[i, j], axes=([3], [0]))

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for idx in range(kh * kw):
            i, j = divmod(idx, kw)
            gxp[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride, :] += np.tensordot(
                g, wd[i, j], axes=([3], [1])
            )
            gw[i, j] = np.tensordot(views[idx], g, axes=([0, 1, 2], [0, 1, 2]))
        gx = gxp[:, pt : pt + h, pl : pl + w, :] if (pt or pb or pl or pr) else gxp
        return gx, gw

    return _emit("conv2d", (x, filters), out, vjp)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum; backward routes to the first (row-major) argmax."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NHWC input, got {x.shape}")
    if not isinstance(window, int) or window < 1 or not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"window and stride must be positive ints, got {window}, {stride}")
    n, h, w, c = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]
    stack = np.stack(
        [x.data[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride, :] for i, j in offsets],
        axis=3,
    )  # [n, oh, ow, window*window, c]
    out = stack.max(axis=3)
    arg = stack.argmax(axis=3)
    k = len(offsets)
    kink = math.inf
    if k >= 2:
        part = np.partition(stack, k - 2, axis=3)
        kink = float((part[:, :, :, -1, :] - part[:, :, :, -2, :]).min())
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        for m, (i, j) in enumerate(offsets):
            gx[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride, :] += g * (arg == m)
        return (gx,)

    return _emit("maxpool2d", (x,), out, vjp, kink=kink)


def standardize_per_image(x: Tensor) -> Tensor:
    """(x - mean) / max(std, 1e-6) per instance over all non-batch axes."""
    if x.ndim < 2:
        raise DimensionError(f"standardize_per_image expects a batch, got {x.shape}")
    axes = tuple(range(1, x.ndim))
    d = x.data
    n = int(np.prod(d.shape[1:]))
    mu = d.mean(axis=axes, keepdims=True)
    std = d.std(axis=axes, keepdims=True)
    s = np.maximum(std, STD_FLOOR)
    floored = std < STD_FLOOR
    y = (d - mu) / s

    def vjp(g):
        gbar = g.mean(axis=axes, keepdims=True)
        proj = (g * y).sum(axis=axes, keepdims=True) / n
        return ((g - gbar - np.where(floored, 0.0, y * proj)) / s,)

    return _emit("standardize_per_image", (x,), y, vjp)


# ---------------------------------------------------------------------------
# divergences


def kl_rows(p: Array, q: Array, validate: bool = True) -> Array:
    """Row-wise KL divergence sum(p * ln(p/q)) with 0*ln(0/q) = 0.

    Both arguments are clamped below at KL_CLAMP inside the log only, so the
    convention holds and the result stays finite. Returns one value per row.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise DimensionError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if validate:
        if p.size == 0:
            raise ValidationError("empty distributions")
        if p.min() < 0.0 or q.min() < 0.0:
            raise ValidationError("distribution entries must be non-negative")
        rs_p = p.sum(axis=1)
        rs_q = q.sum(axis=1)
        if np.abs(rs_p - 1.0).max() > 1e-6 or np.abs(rs_q - 1.0).max() > 1e-6:
            raise ValidationError("distribution rows must sum to 1 within 1e-6")
    lp = np.log(np.maximum(p, KL_CLAMP))
    lq = np.log(np.maximum(q, KL_CLAMP))
    return (p * (lp - lq)).sum(axis=1)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) as a scalar; batched inputs return the mean over rows.

    Gradients flow into both arguments (needed when both depend on trained
    parameters, as in the hidden-layer probe loss).
    """
    rows = kl_rows(p.data, q.data, validate=True)
    nrows = rows.shape[0]
    p2 = np.atleast_2d(p.data)
    q2 = np.atleast_2d(q.data)
    lp = np.log(np.maximum(p2, KL_CLAMP))
    lq = np.log(np.maximum(q2, KL_CLAMP))
    p_shape, q_shape = p.shape, q.shape

    def vjp(g):
        gp = (lp - lq + (p2 > KL_CLAMP)) * (g / nrows)
        gq = np.where(q2 > KL_CLAMP, -p2 / np.maximum(q2, KL_CLAMP), 0.0) * (g / nrows)
        return gp.reshape(p_shape), gq.reshape(q_shape)

    return _emit("kl_divergence", (p, q), np.asarray(rows.mean()), vjp)


# ---------------------------------------------------------------------------
# reverse pass and the finite-difference oracle


def backward(tape: Tape, output: Tensor) -> dict[Tensor, Array]:
    """Reverse-mode accumulation from a scalar output over the tape.

    Returns a mapping for every gradient-requiring leaf (plus watched
    tensors); leaves the output never depended on get zero gradients. Also
    stores each gradient in the tensor's ``grad`` slot.
    """
    if output.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {output.shape}")
    grads: dict[int, Array] = {id(output): np.ones_like(output.data)}
    produced = {id(rec.output) for rec in tape.records}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            cur = grads.get(id(t))
            grads[id(t)] = gi if cur is None else cur + gi
    leaves: dict[int, Tensor] = dict(tape._watched)
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
    result: dict[Tensor, Array] = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result


def _eval_scalar(f: Callable[[Tensor], Tensor], values: Array) -> float:
    out = f(Tensor(values))
    if out.size != 1:
        raise ContractError(f"grad_check function must return a scalar, got shape {out.shape}")
    v = out.item()
    if not math.isfinite(v):
        raise EvaluationError("function value is not finite during finite differencing")
    return v


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    coordinate. The function must be finite (and should be differentiable)
    in an h-neighborhood of x.
    """
    if not (isinstance(h, (int, float)) and math.isfinite(h) and h > 0):
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64, copy=True)
    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
        if out.size != 1:
            raise ContractError(f"grad_check function must return a scalar, got shape {out.shape}")
        _eval_scalar_check = out.item()
        if not math.isfinite(_eval_scalar_check):
            raise EvaluationError("function value is not finite at the expansion point")
    analytic = backward(tape, out)[leaf].ravel()
    worst = 0.0
    flat = base.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, base)
        flat[i] = orig - h
        fm = _eval_scalar(f, base)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        err = abs(num - analytic[i]) / max(abs(num), abs(analytic[i]), _REL_FLOOR)
        worst = max(worst, err)
    return worst
