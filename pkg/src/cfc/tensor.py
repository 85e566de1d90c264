"""Dense rank-<=3 tensors with tape-based reverse-mode differentiation.

Every op checks shapes eagerly, records itself on the innermost active
:class:`Tape` when any input requires a gradient, and (when
``CHECK_FINITE`` is on) rejects NaN/Inf results at the op that produced them.

    >>> import numpy as np
    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape():
    ...     loss = sum_all(matmul(w, w))
    ...     loss.backward()
    >>> w.grad
    array([[4., 4.],
           [4., 4.]])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    SpanError,
    TapeError,
)

MAX_RANK = 3
CHECK_FINITE = True

_dtype = np.float64
_tapes: list["Tape"] = []


def default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    """Switch the float width used for new tensors (float64 or float32)."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded op; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops.

    Records are appended in execution order, so every op's inputs were
    produced by earlier records (or are leaves); a reverse replay therefore
    visits each node once, after all of its consumers.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.replayed = False

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if self.replayed:
            raise TapeError("cannot record on a tape that was already replayed; call reset()")
        self.records.append((out, inputs, backward))

    def reset(self) -> None:
        self.records = []
        self.replayed = False

    def backward(self, loss: Tensor) -> None:
        if self.replayed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if not self.records:
            raise TapeError("tape is empty")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.data.dtype)
                else:
                    inp.grad = inp.grad + g
        self.replayed = True


def active_tape() -> Optional[Tape]:
    return _tapes[-1] if _tapes else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for evaluation passes."""
    saved = _tapes[:]
    _tapes.clear()
    try:
        yield
    finally:
        _tapes[:] = saved


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result and record it for differentiation.

    ``backward`` maps the output gradient to a tuple with one entry per input
    (``None`` for inputs that need no gradient).
    """
    if data.ndim > MAX_RANK:
        raise DimensionError(f"{op}: result rank {data.ndim} exceeds {MAX_RANK}")
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, tuple(inputs), backward)
    return out


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a 2-D operand is shared across the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank>=2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _sum_to(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if bd.shape[-1] == 1:
        # BLAS gemv rounds rows differently depending on their position in the
        # block; an explicit row-wise reduction keeps each row's result independent
        # of its neighbours (exact permutation equivariance).
        out = np.sum(ad * np.swapaxes(bd, -1, -2), axis=-1, keepdims=True)
    else:
        out = ad @ bd
    return make_op(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank>=2, got {x.shape}")
    return make_op(np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector matching a's last axis."""
    bias = b.ndim == 1 and a.ndim > 1
    if a.shape != b.shape and not (bias and b.shape[0] == a.shape[-1]):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or a constant array broadcastable to ``x``."""
    f = np.asarray(factor, dtype=x.data.dtype)
    try:
        out = x.data * f
    except ValueError as e:
        raise DimensionError(f"scale: factor {f.shape} does not broadcast to {x.shape}") from e
    if out.shape != x.shape:
        raise DimensionError(f"scale: factor {f.shape} would change shape {x.shape}")
    return make_op(out, (x,), lambda g: (g * f,), "scale")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, *operands):
    """Dispatch by name: ``elementwise("add", a, b)``, ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# -- reductions and normalisation -------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    shape = x.shape
    return make_op(x.data.sum(axis=axis), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
                   "sum_axis")


def softmax_masked(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked-out positions get exactly zero weight."""
    z = x.data
    if mask is None:
        m = z - z.max(axis=axis, keepdims=True)
        e = np.exp(m)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, z.shape)
        except ValueError as e:
            raise DimensionError(f"softmax mask {mask.shape} does not match {z.shape}") from e
        if not np.all(mask.any(axis=axis)):
            raise DegenerateInputError("softmax over a fully masked slice")
        big = np.where(mask, z, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z - big, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Per-row ``-log softmax(logits)[target]`` over unmasked columns -> shape [B]."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, N] logits, got {z.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(z.shape[0])
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    big = np.where(mask, z, -np.inf).max(axis=1, keepdims=True)
    shifted = np.where(mask, z - big, -np.inf)
    logz = np.log(np.exp(shifted).sum(axis=1))
    out = logz - shifted[rows, targets]
    p = np.where(mask, np.exp(shifted - logz[:, None]), 0.0)

    def backward(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return (d * g[:, None],)

    return make_op(out, (logits,), backward, "cross_entropy")


# -- structural --------------------------------------------------------------

def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.ndim != b.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    if any(a.shape[i] != b.shape[i] for i in range(a.ndim) if i != ax):
        raise DimensionError(f"concat: shapes {a.shape} and {b.shape} differ off axis {ax}")
    split = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return make_op(np.concatenate([a.data, b.data], axis=ax), (a, b), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack of an empty list")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack: shape {t.shape} differs from {shape}")
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return make_op(data, tuple(tensors), backward, "stack")


def stack_padded(rows: Sequence[Tensor]):
    """Stack variable-length [T_i, d] tensors into zero-padded [n, T_max, d] plus a bool mask."""
    if not rows:
        raise DimensionError("stack_padded of an empty list")
    d = rows[0].shape[-1]
    for r in rows:
        if r.ndim != 2 or r.shape[1] != d:
            raise DimensionError(f"stack_padded: expected [T, {d}] rows, got {r.shape}")
    lengths = [r.shape[0] for r in rows]
    t_max = max(lengths)
    data = np.zeros((len(rows), t_max, d), dtype=rows[0].data.dtype)
    mask = np.zeros((len(rows), t_max), dtype=bool)
    for i, r in enumerate(rows):
        data[i, : lengths[i]] = r.data
        mask[i, : lengths[i]] = True

    def backward(g):
        return tuple(g[i, : lengths[i]] for i in range(len(rows)))

    return make_op(data, tuple(rows), backward, "stack_padded"), mask


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {old} to {shape}") from e
    return make_op(data, (x,), lambda g: (g.reshape(old),), "reshape")


def slice_rows(x: Tensor, start: int, end: int) -> Tensor:
    """Rows ``[start, end)`` along axis 0."""
    n = x.shape[0] if x.ndim else 0
    if not (0 <= start < end <= n):
        raise SpanError(f"row span [{start}, {end}) invalid for {n} rows")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:end] = g
        return (full,)

    return make_op(x.data[start:end].copy(), (x,), backward, "slice_rows")


def gather(x: Tensor, index) -> Tensor:
    """Select rows of ``x`` along axis 0: result shape is ``index.shape + x.shape[1:]``."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise SpanError(f"gather index out of range for {n} rows")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return make_op(x.data[index], (x,), backward, "gather")


# -- finite-difference checking ----------------------------------------------

def numeric_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``x.data``.

    ``order=2`` is the two-point stencil; ``order=4`` the five-point one.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)

    def at(i, delta):
        old = flat[i]
        flat[i] = old + delta
        try:
            with no_grad():
                return float(f().data)
        finally:
            flat[i] = old

    for i in range(flat.size):
        if order == 2:
            gflat[i] = (at(i, eps) - at(i, -eps)) / (2 * eps)
        elif order == 4:
            near = at(i, eps) - at(i, -eps)
            far = at(i, 2 * eps) - at(i, -2 * eps)
            gflat[i] = (8 * near - far) / (12 * eps)
        else:
            raise ValueError("order must be 2 or 4")
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(f: Callable[[], Tensor], params, eps: float = 1e-5,
                   order: int = 2, floor: float = 1e-8) -> dict:
    """Compare tape gradients of ``f()`` against central differences.

    ``params`` is a sequence of tensors or a ``{name: tensor}`` dict. Returns
    ``{key: max relative error}`` where the key is the dict key, else the
    tensor name or its position.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(p.name or i, p) for i, p in enumerate(params)]
    for _, p in items:
        p.grad = None
    with Tape():
        f().backward()
    report = {}
    for key, p in items:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(f, p, eps=eps, order=order)
        report[key] = float(relative_error(analytic, numeric, floor).max())
    return report
