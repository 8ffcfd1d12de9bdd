"""Dense float64 tensors recorded on a reverse-mode differentiation tape.

The tape is a Wengert list: every primitive application is appended in
execution order, and backward walks the list in exact reverse order. One
tape is active per thread; tensors built while no tape is active are plain
values (inference mode).
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "AutodiffError",
    "NonFiniteError",
    "GradCheckReport",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "split", "expand0", "gather_rows", "softmax", "mean", "var",
    "tsum", "sqrt", "exp", "gelu", "sigmoid", "cosine_similarity",
    "smooth_l1", "constant", "zeros", "primitive_forward", "PRIMITIVE_KINDS",
    "backward", "grad_check", "zero_grad", "no_tape_active",
]


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested primitive."""


class AutodiffError(RuntimeError):
    """Backward was asked to do something the tape cannot support."""


class NonFiniteError(AutodiffError):
    """A primitive produced NaN/inf while finite checking was enabled."""


_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_COS_EPS = 1e-12

_tape_ids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def no_tape_active() -> bool:
    return _active_tape() is None


class Tensor:
    """Row-major float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; canonical entry points are the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


@dataclass
class _Entry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications for one execution context.

    Usable as a context manager; nested tapes shadow outer ones on the
    current thread. `check_finite=True` makes every recorded primitive
    validate its output (used by grad_check).
    """

    def __init__(self, check_finite: bool = False):
        self.id = next(_tape_ids)
        self.entries: list[_Entry] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("tape stack corrupted: exiting a non-active tape")
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dLeaf into every requires_grad leaf below `loss`.

        Repeated calls without zeroing accumulate; intermediate gradients are
        held only transiently.
        """
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.tape_id != self.id:
            raise AutodiffError("loss is detached from this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            for tensor, g_in in zip(entry.inputs, entry.vjp(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                if tensor.tape_id == self.id:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + g_in
                    else:
                        grads[key] = g_in
                else:  # leaf for this tape
                    if tensor.grad is None:
                        tensor.grad = np.array(g_in, dtype=np.float64, copy=True)
                    else:
                        tensor.grad += g_in

    def clear(self) -> None:
        """Drop all entries and free every grad buffer the tape touched."""
        for entry in self.entries:
            entry.output.grad = None
            for tensor in entry.inputs:
                tensor.grad = None
        self.entries.clear()


def backward(loss: Tensor) -> None:
    """Backward through the currently active tape."""
    tape = _active_tape()
    if tape is None:
        raise AutodiffError("no active tape")
    tape.backward(loss)


def zero_grad(params) -> None:
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        if tape.check_finite and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"op '{kind}' produced non-finite values")
        out.tape_id = tape.id
        tape.entries.append(_Entry(kind, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), ad * bd, vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record("div", (a, b), ad / bd, vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


# ---------------------------------------------------------------------------
# matmul / structural ops


def matmul(a, b) -> Tensor:
    """2-D @ 2-D, batched 3-D @ 3-D, or batched 3-D @ 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: batch shapes incompatible, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
        B, n, k = ad.shape

        def vjp(g):
            da = g @ bd.T
            db = ad.reshape(B * n, k).T @ g.reshape(B * n, -1)
            return da, db

    else:
        raise ShapeError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return _record("matmul", (a, b), ad @ bd, vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for ndim {ndim}")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    return _record("concat", tensors, out, vjp)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Partition along `axis` into pieces of the given sizes."""
    a = _as_tensor(a)
    ndim = a.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"split: axis {axis} out of range for ndim {ndim}")
    axis = axis % ndim
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to dim {a.data.shape[axis]}")
    pieces = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        pieces.append(_record("split", (a,), a.data[sl].copy(), vjp))
        start += size
    return pieces


def expand0(a, n: int) -> Tensor:
    """Prepend a broadcast axis of length n (shared data, summed gradient)."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return _record("expand0", (a,), out, lambda g: (g.sum(axis=0),))


def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.data.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", (a,), a.data[idx], vjp)


# ---------------------------------------------------------------------------
# reductions


def _reduced_count(shape: tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[i] for i in axes]))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    n = _reduced_count(shape, axis)

    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims) / n,)

    return _record("mean", (a,), np.mean(a.data, axis=axis, keepdims=keepdims), vjp)


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance over `axis`."""
    a = _as_tensor(a)
    shape = a.data.shape
    n = _reduced_count(shape, axis)
    centered = a.data - np.mean(a.data, axis=axis, keepdims=True)

    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims) * (2.0 / n) * centered,)

    return _record("var", (a,), np.var(a.data, axis=axis, keepdims=keepdims), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, vjp)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    return _record("sqrt", (a,), y, lambda g: (g / (2.0 * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _record("exp", (a,), y, lambda g: (g * y,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + _erf(x / _SQRT_2))
    y = x * phi_cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi_cdf + x * pdf),)

    return _record("gelu", (a,), y, vjp)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity over the last axis; output drops that axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    dot = np.sum(ad * bd, axis=-1)
    na = np.sqrt(np.sum(ad * ad, axis=-1))
    nb = np.sqrt(np.sum(bd * bd, axis=-1))
    denom = na * nb + _COS_EPS
    cos = dot / denom

    def vjp(g):
        ge = g[..., None]
        de = denom[..., None]
        da = ge * (bd / de - (dot / (denom * denom))[..., None] * (nb / na)[..., None] * ad)
        db = ge * (ad / de - (dot / (denom * denom))[..., None] * (na / nb)[..., None] * bd)
        return da, db

    return _record("cosine_similarity", (a, b), cos, vjp)


def smooth_l1(a, b, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) of a - b."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"smooth_l1: shapes differ, {a.data.shape} vs {b.data.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1: beta must be positive")
    r = a.data - b.data
    absr = np.abs(r)
    y = np.where(absr < beta, 0.5 * r * r / beta, absr - 0.5 * beta)

    def vjp(g):
        dr = g * np.clip(r / beta, -1.0, 1.0)
        return dr, -dr

    return _record("smooth_l1", (a, b), y, vjp)


# ---------------------------------------------------------------------------
# generic dispatch over the primitive set by kind name

PRIMITIVE_KINDS = (
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "split", "expand0", "gather_rows", "softmax", "mean", "var",
    "sum", "sqrt", "exp", "gelu", "sigmoid", "cosine_similarity", "smooth_l1",
)

_DISPATCH: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "transpose": lambda a, axes=None: transpose(a, axes),
    "reshape": lambda a, shape: reshape(a, shape),
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "split": lambda a, sizes, axis=0: split(a, sizes, axis=axis),
    "expand0": lambda a, n: expand0(a, n),
    "gather_rows": lambda a, indices: gather_rows(a, indices),
    "softmax": softmax,
    "mean": mean,
    "var": var,
    "sum": tsum,
    "sqrt": sqrt,
    "exp": exp,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "cosine_similarity": cosine_similarity,
    "smooth_l1": smooth_l1,
}


def primitive_forward(kind: str, inputs: Sequence[Tensor], **attrs):
    """Apply one primitive by name; recorded like any direct call."""
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise KeyError(f"unknown primitive kind '{kind}'")
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list[float]
    passed: bool
    tol: float
    step: float

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"grad_check[{verdict}] max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tol:.1e} step={self.step:.1e}")


def grad_check(f, inputs: Sequence[Tensor], step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued `f` against central
    finite differences.

    Relative error per element is |a-n| / max(1, |a|, |n|); the report holds
    the max per input and overall.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check: inputs must be finite")
        t.requires_grad = True
        t.grad = None

    with Tape(check_finite=True) as tape:
        out = f(*inputs)
        if out.data.size != 1:
            raise AutodiffError(f"grad_check: f must be scalar-valued, got shape {out.data.shape}")
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    per_input: list[float] = []
    for which, t in enumerate(inputs):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig - step
            f_minus = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[which]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        per_input.append(float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0)

    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(worst, per_input, worst <= tol, tol, step)
