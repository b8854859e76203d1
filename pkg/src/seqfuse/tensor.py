"""
Dense tensors with a small reverse-mode autodiff tape.

Storage is a contiguous row-major NumPy array of at most three extents; a
3-D tensor is read as a stack of matrices. Every primitive is a plain
function returning a new, immutable :class:`Tensor`. When a :class:`GradTape`
is active and at least one input requires a gradient, the primitive appends
its output node to the tape together with a closure mapping the output
gradient to input gradients. Creation order is a topological order, so the
backward sweep simply walks the tape in reverse.

Precision is a process-wide mode (``"f32"`` or ``"f64"``), initialised from
the ``SEQFUSE_PRECISION`` environment variable.

Primitives also report floating-point operation counts to any active
:func:`count_flops` tally. Conventions: a multiply-add is 2 FLOPs, an
elementwise binary op or ReLU is 1 FLOP per output element, a row softmax
is 5 per element, a layer norm is 8 per element, reductions are 1 per input
element. Data movement (slicing, concatenation, gathering, reshaping,
broadcasting) is free.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
import threading
from collections import defaultdict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

SOFTMAX_FLOPS_PER_ELEMENT = 5
LAYERNORM_FLOPS_PER_ELEMENT = 8

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_precision = os.environ.get("SEQFUSE_PRECISION", "f32")
if _precision not in _PRECISIONS:
    raise ValueError(f"SEQFUSE_PRECISION must be one of {sorted(_PRECISIONS)}, got {_precision!r}")


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _PRECISIONS[_precision]


def set_precision(name: str) -> None:
    global _precision
    if name not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}")
    _precision = name


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the process-wide precision mode."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


# --------------------------------------------------------------------------
# Tape and FLOP tally
# --------------------------------------------------------------------------

_active_tape: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar("seqfuse_tape", default=None)
_active_tallies: contextvars.ContextVar[tuple[FlopTally, ...]] = contextvars.ContextVar(
    "seqfuse_flops", default=()
)


class FlopTally:
    """Running FLOP count, split by primitive name."""

    def __init__(self) -> None:
        self.by_op: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, flops: int) -> None:
        with self._lock:
            self.by_op[op] += int(flops)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopTally]:
    tally = FlopTally()
    token = _active_tallies.set(_active_tallies.get() + (tally,))
    try:
        yield tally
    finally:
        _active_tallies.reset(token)


def _tally(op: str, flops: int) -> None:
    for tally in _active_tallies.get():
        tally.add(op, flops)


class GradTape:
    """Ordered record of differentiable primitive applications.

    Use as a context manager; primitives executed inside the block whose
    inputs require gradients are recorded. One tape per thread.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> GradTape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        return backward(self, loss, params)


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(param) for each leaf in ``params``.

    Parameters the loss does not depend on get an all-zero gradient. The
    gradients are also stored on ``param.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        out.append(p.grad)
    return out


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data)
        dtype = get_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.ndim > 3:
            raise DimensionError(f"tensors have at most 3 extents, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


# BLAS libraries pick different kernels (and summation orders) depending on
# the overall matrix size, so the same row of ``a`` can round differently in
# a small and a large product. Forward products therefore run as a stack of
# zero-padded, fixed-height row tiles: every row is computed by an identically
# shaped GEMM whatever the surrounding batch, and results are bitwise
# independent of how rows are grouped.
ROW_TILE = 8


def _tile_rows(x: np.ndarray) -> np.ndarray:
    """Pad the row axis (-2) to a ``ROW_TILE`` multiple and split it into tiles."""
    *lead, p, q = x.shape
    padded_p = -(-p // ROW_TILE) * ROW_TILE
    if padded_p != p:
        pad = np.zeros((*lead, padded_p, q), dtype=x.dtype)
        pad[..., :p, :] = x
        x = pad
    return x.reshape(*lead, padded_p // ROW_TILE, ROW_TILE, q)


def _row_stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0 or b.size == 0:
        return np.matmul(a, b)
    if b.ndim == 2:
        rows = a.reshape(-1, a.shape[-1])
        out = np.matmul(_tile_rows(rows), b).reshape(-1, b.shape[1])[: rows.shape[0]]
        return out.reshape(*a.shape[:-1], b.shape[1])
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0]:
        out = np.matmul(_tile_rows(a), b[:, None])
        return out.reshape(a.shape[0], -1, b.shape[2])[:, : a.shape[1]]
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    ``c[..., i, j] = sum_k a[..., i, k] * b[..., k, j]``. Each output row
    depends only on its own row of ``a`` (and ``b``), bit for bit.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    data = np.ascontiguousarray(_row_stable_matmul(a.data, b.data))
    _tally("matmul", 2 * data.size * a.shape[-1])

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), _bw, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data
    _tally("add", data.size)
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data
    _tally("sub", data.size)
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    _tally("mul", data.size)

    def _bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), _bw, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    factor = get_dtype()(factor)
    data = a.data * factor
    _tally("scale", data.size)
    return _result(data, (a,), lambda g: (g * factor,), "scale")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    _tally("relu", data.size)
    return _result(data, (a,), lambda g: (g * (a.data > 0),), "relu")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed as exp(x - rowmax) / sum."""
    if x.shape[-1] == 0:
        return _result(x.data.copy(), (x,), lambda g: (np.zeros_like(x.data),), "softmax")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    _tally("softmax", SOFTMAX_FLOPS_PER_ELEMENT * y.size)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), _bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over its last axis with the population variance."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    _tally("layer_norm", LAYERNORM_FLOPS_PER_ELEMENT * data.size)

    def _bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _result(data, (x, gamma, beta), _bw, "layer_norm")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 extents, got {a.shape}")
    data = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _result(data, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def _bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(data, tuple(parts), _bw, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    axis = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = np.ascontiguousarray(a.data[index])

    def _bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(data, (a,), _bw, "slice")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``out[..., :] = table[ids[...], :]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"ids out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(data, (table,), _bw, "gather")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    return _result(data, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def sum_all(a: Tensor) -> Tensor:
    _tally("sum", a.size)
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _result(data, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    _tally("mean", a.size)
    n = a.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _result(data, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
