"""Dense tensors with reverse-mode automatic differentiation.

Values are plain numpy arrays in a globally selected precision: float64
for verification work (finite-difference gradient checks are unreliable
in single precision) and float32 for training. Every operation executed
while gradients are enabled appends its backward rule to a per-thread
tape; ``backward`` replays the tape in reverse order and accumulates
gradients into each tensor that requires them.

Broadcasting in binary operations is restricted to leading dimensions:
the smaller operand's shape must equal the trailing suffix of the larger
one (a scalar broadcasts against anything). Layer code passes explicit
shapes everywhere else.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "set_default_dtype",
    "get_default_dtype",
    "using_dtype",
    "no_grad",
    "enable_grad",
    "grad_enabled",
    "current_tape",
    "record_op",
    "accumulate_grad",
    "accumulate_grad_at",
    "astensor",
    "add",
    "sub",
    "mul",
    "log1p",
    "expm1",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "slice_axis",
    "backward",
    "gradient_check",
]

_VALID_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Select the precision used for all tensors created afterwards."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _VALID_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    _default_dtype = dt


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default precision."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


class Tape:
    """Ordered record of executed operations and their backward rules.

    Operations are appended in execution order, so inputs always precede
    the operations that consume them; replaying the rules in reverse
    yields gradients by the chain rule.
    """

    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list[_TapeOp] = []

    def __len__(self) -> int:
        return len(self.ops)

    def clear(self) -> None:
        self.ops.clear()


class _TapeOp:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
    return _local


def current_tape() -> Tape:
    """The tape recording operations on the calling thread."""
    return _ctx().tape


def grad_enabled() -> bool:
    return _ctx().grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording (inference / numeric probing)."""
    ctx = _ctx()
    previous = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = previous


@contextmanager
def enable_grad():
    """Force tape recording back on inside a ``no_grad`` region."""
    ctx = _ctx()
    previous = ctx.grad_enabled
    ctx.grad_enabled = True
    try:
        yield
    finally:
        ctx.grad_enabled = previous


class Tensor:
    """A dense real-valued array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = np.dtype(dtype) if dtype is not None else _default_dtype
        if dt not in _VALID_DTYPES:
            raise ValueError(f"unsupported dtype {dt}")
        self.data = np.asarray(data, dtype=dt)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # Internal: wrap an op result without recasting its dtype.
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def zero_grad(self) -> None:
        """Drop the gradient buffer; the next backward starts fresh."""
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routes through the module-level ops.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _scalar_err(t):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.data.shape}")


def astensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through.

    Float arrays keep their own dtype unless ``like`` asks otherwise;
    scalars and lists adopt ``like``'s dtype or the engine default.
    """
    if isinstance(x, Tensor):
        return x
    if like is None and isinstance(x, np.ndarray) and x.dtype in _VALID_DTYPES:
        return Tensor._wrap(x)
    dtype = like.data.dtype if like is not None else _default_dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def record_op(out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable[[np.ndarray], None]) -> Tensor:
    """Register ``out`` on the current tape if any input needs gradients.

    ``backward_rule`` receives the upstream gradient of ``out`` and must
    push contributions into the inputs via ``accumulate_grad``. This is
    the extension point used by the layer library for fused operations
    (convolutions, normalization) that bypass the elementwise ops.
    """
    ctx = _ctx()
    if ctx.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        ctx.tape.ops.append(_TapeOp(out, tuple(inputs), backward_rule))
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution into ``t`` (no-op unless it requires grad)."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def accumulate_grad_at(t: Tensor, index, g: np.ndarray) -> None:
    """Scatter-add a gradient contribution into a slice of ``t``'s buffer."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[index] += g


# ---------------------------------------------------------------------------
# Broadcasting helpers (leading dimensions only)


def _check_broadcast(sa: tuple, sb: tuple, opname: str) -> tuple:
    if sa == sb:
        return sa
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == len(big) or (small and small != big[len(big) - len(small):]):
        raise ShapeError(f"{opname}: shapes {sa} and {sb} are not broadcast-compatible "
                         "(broadcasting over leading dimensions only)")
    return big


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# Elementwise operations


def _binary(a, b, opname, fwd, bwd_a, bwd_b) -> Tensor:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = astensor(a, like=b)
    a = astensor(a)
    b = astensor(b, like=a)
    _check_broadcast(a.data.shape, b.data.shape, opname)
    out = Tensor._wrap(fwd(a.data, b.data))

    def backward_rule(g):
        accumulate_grad(a, _unbroadcast(bwd_a(g, a.data, b.data), a.data.shape))
        accumulate_grad(b, _unbroadcast(bwd_b(g, a.data, b.data), b.data.shape))

    return record_op(out, (a, b), backward_rule)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(x, fwd, make_bwd) -> Tensor:
    x = astensor(x)
    out_data = fwd(x.data)
    out = Tensor._wrap(out_data)
    bwd = make_bwd(x.data, out_data)

    def backward_rule(g):
        accumulate_grad(x, bwd(g))

    return record_op(out, (x,), backward_rule)


def log1p(x) -> Tensor:
    return _unary(x, np.log1p, lambda xd, od: lambda g: g / (1.0 + xd))


def expm1(x) -> Tensor:
    return _unary(x, np.expm1, lambda xd, od: lambda g: g * (od + 1.0))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda xd, od: lambda g: g * (1.0 - od * od))


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # Stable in both tails: never exponentiates a large positive value.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid_data, lambda xd, od: lambda g: g * od * (1.0 - od))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    def fwd(xd):
        return np.where(xd >= 0, xd, slope * xd)

    return _unary(x, fwd, lambda xd, od: lambda g: g * np.where(xd >= 0, 1.0, slope))


# ---------------------------------------------------------------------------
# Linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a = astensor(a)
    b = astensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul requires rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def backward_rule(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return record_op(out, (a, b), backward_rule)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank-{ndim} tensor")
        normalized.append(ax % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(normalized))


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return np.broadcast_to(g.reshape(keep), shape)


def reduce_sum(x, axes=None) -> Tensor:
    x = astensor(x)
    ax = _normalize_axes(axes, x.data.ndim)
    out = Tensor._wrap(x.data.sum(axis=ax))

    def backward_rule(g):
        accumulate_grad(x, _expand_reduced(g, x.data.shape, ax))

    return record_op(out, (x,), backward_rule)


def reduce_mean(x, axes=None) -> Tensor:
    x = astensor(x)
    ax = _normalize_axes(axes, x.data.ndim)
    count = 1
    for a in ax:
        count *= x.data.shape[a]
    out = Tensor._wrap(x.data.mean(axis=ax))

    def backward_rule(g):
        accumulate_grad(x, _expand_reduced(g / count, x.data.shape, ax))

    return record_op(out, (x,), backward_rule)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    out = Tensor._wrap(x.data.reshape(shape))

    def backward_rule(g):
        accumulate_grad(x, g.reshape(x.data.shape))

    return record_op(out, (x,), backward_rule)


def transpose(x, axes=None) -> Tensor:
    x = astensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out = Tensor._wrap(x.data.transpose(axes))

    def backward_rule(g):
        accumulate_grad(x, np.ascontiguousarray(g.transpose(inverse)))

    return record_op(out, (x,), backward_rule)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [astensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    axis = axis % parts[0].data.ndim
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def backward_rule(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            accumulate_grad(p, np.ascontiguousarray(g[tuple(idx)]))
            offset += n

    return record_op(out, tuple(parts), backward_rule)


def stack(tensors, axis: int = 0) -> Tensor:
    parts = [astensor(t) for t in tensors]
    if not parts:
        raise ShapeError("stack of an empty sequence")
    out = Tensor._wrap(np.stack([p.data for p in parts], axis=axis))

    def backward_rule(g):
        for i, p in enumerate(parts):
            # np.take copies; do not wrap in ascontiguousarray, which would
            # promote 0-d slices of scalar stacks to shape (1,).
            accumulate_grad(p, np.take(g, i, axis=axis))

    return record_op(out, tuple(parts), backward_rule)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = astensor(x)
    axis = axis % x.data.ndim
    extent = x.data.shape[axis]
    if not (0 <= start <= stop <= extent):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} of shape {x.data.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor._wrap(x.data[idx])

    def backward_rule(g):
        accumulate_grad_at(x, idx, g)

    return record_op(out, (x,), backward_rule)


# ---------------------------------------------------------------------------
# Backward pass and verification


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every tensor on its tape.

    The tape is consumed: a second backward needs a fresh forward pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward expects a Tensor, got {type(loss).__name__}")
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = _ctx().tape
    if not tape.ops:
        raise RuntimeError("backward on an empty tape")
    if not any(op.out is loss for op in tape.ops):
        raise RuntimeError("loss is not an output recorded on the current tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for op in reversed(tape.ops):
            g = op.out.grad
            if g is not None:
                op.backward(g)
    finally:
        tape.ops.clear()


def gradient_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic function producing a scalar Tensor. It
    is re-evaluated with ``x.data`` perturbed in place, so closures that
    read ``x`` through captured references (e.g. model parameters) work
    as well as functions of the argument itself. Requires float64 data.
    """
    if x.data.dtype != np.float64:
        raise ValueError("gradient_check requires float64 tensors; switch the default dtype")
    previous_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with enable_grad():
            loss = f(x)
            if loss.data.size != 1:
                raise ShapeError(f"gradient_check needs a scalar-valued function, got {loss.data.shape}")
            if not np.isfinite(loss.data).all():
                raise FloatingPointError("non-finite loss in gradient_check")
            backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

        flat = x.data.reshape(-1)
        n = flat.size
        if max_coords is not None and max_coords < n:
            rng = rng or np.random.default_rng(0)
            indices = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            indices = np.arange(n)

        worst = 0.0
        analytic_flat = analytic.reshape(-1)
        with no_grad():
            for i in indices:
                original = flat[i]
                flat[i] = original + eps
                f_plus = float(f(x).data.reshape(-1)[0])
                flat[i] = original - eps
                f_minus = float(f(x).data.reshape(-1)[0])
                flat[i] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError("non-finite values encountered in finite differences")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(analytic_flat[i] - numeric) / max(abs(numeric), 1e-8)
                worst = max(worst, rel)
        return worst
    finally:
        x.requires_grad = previous_flag
