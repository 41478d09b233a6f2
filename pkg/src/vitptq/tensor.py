"""Dense float32 tensors with tape-based reverse-mode gradients.

Only what a transformer block and its reconstruction loss need: elementwise
arithmetic, matmul with broadcastable batch dimensions, softmax, LayerNorm,
GELU, shape surgery, and an L2-distance reduction. Forward accumulation runs
in float64 and results are stored as float32 so oracle comparisons stay
reproducible. Transposes materialize; there are no strided views.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

LN_EPS = 1e-6  # LayerNorm default, matches the common ViT convention

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A contiguous row-major float32 array plus an optional gradient buffer.

    Tensors are immutable after creation except for ``grad``, which backward
    passes accumulate into. ``data`` may be reassigned only by the optimizer,
    which owns its parameters.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32)

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{rg})"


class GradTape:
    """Ordered record of executed primitives.

    Each record holds the input tensors, the output tensor, and a closure
    mapping the output adjoint to per-input adjoints. Replaying the tape in
    reverse accumulates into ``grad`` buffers, so running ``backward`` twice
    without zeroing doubles every gradient.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self._records.append((tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self._records)


def backward(loss: Tensor, tape: GradTape) -> None:
    """Propagate d(loss)/d(tensor) to every requires_grad tensor on the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for inputs, output, bwd in reversed(tape._records):
        g_out = adjoints.get(id(output))
        if g_out is None:
            continue
        for t, g in zip(inputs, bwd(g_out)):
            if g is None or not t.requires_grad:
                continue
            tensors[id(t)] = t
            prev = adjoints.get(id(t))
            adjoints[id(t)] = g.astype(np.float32) if prev is None else prev + g.astype(np.float32)
    for tid, t in tensors.items():
        if t.requires_grad:
            t.accumulate_grad(adjoints[tid])


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
          tape: Optional[GradTape]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd, tape)


def sub(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(data, (a, b), bwd, tape)


def mul(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape))

    return _make(data, (a, b), bwd, tape)


def scale(a: Tensor, c: float, tape: Optional[GradTape] = None) -> Tensor:
    c = float(c)
    data = a.data * np.float32(c)

    def bwd(g):
        return (g * np.float32(c),)

    return _make(data, (a,), bwd, tape)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Accumulation happens in float64 and the result is stored as float32.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions do not broadcast: {a.shape} vs {b.shape}")
    data = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64)).astype(np.float32)
    a_data, b_data = a.data, b.data

    def bwd(g):
        g64 = g.astype(np.float64)
        da = np.matmul(g64, np.swapaxes(b_data.astype(np.float64), -1, -2))
        db = np.matmul(np.swapaxes(a_data.astype(np.float64), -1, -2), g64)
        return (_unbroadcast(da, a.shape).astype(np.float32),
                _unbroadcast(db, b.shape).astype(np.float32))

    return _make(data, (a, b), bwd, tape)


# ---------------------------------------------------------------------------
# shape surgery (all materialize contiguous copies)

def reshape(a: Tensor, shape, tape: Optional[GradTape] = None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    data = a.data.reshape(shape).copy()
    old_shape = a.shape

    def bwd(g):
        return (g.reshape(old_shape),)

    return _make(data, (a,), bwd, tape)


def transpose(a: Tensor, axes, tape: Optional[GradTape] = None) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for shape {a.shape}")
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(data, (a,), bwd, tape)


def slice_axis(a: Tensor, axis: int, start: int, stop: int,
               tape: Optional[GradTape] = None) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"slice axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice [{start}:{stop}] invalid for axis of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = np.ascontiguousarray(a.data[index])
    full_shape = a.shape

    def bwd(g):
        out = np.zeros(full_shape, dtype=np.float32)
        out[index] = g
        return (out,)

    return _make(data, (a,), bwd, tape)


def concat(tensors: Sequence[Tensor], axis: int, tape: Optional[GradTape] = None) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat axis {axis} invalid for shape {tensors[0].shape}")
    axis = axis % ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(np.ascontiguousarray(s) for s in splits)

    return _make(data, tuple(tensors), bwd, tape)


# ---------------------------------------------------------------------------
# nonlinearities

def softmax(x: Tensor, axis: int, tape: Optional[GradTape] = None) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    x64 = x.data.astype(np.float64)
    x64 = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(x64)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(np.float32)

    def bwd(g):
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=axis, keepdims=True)
        return ((y64 * (g64 - dot)).astype(np.float32),)

    return _make(y, (x,), bwd, tape)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS,
              tape: Optional[GradTape] = None) -> Tensor:
    """Per-token normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv_std
    y = (gamma.data.astype(np.float64) * xhat + beta.data.astype(np.float64)).astype(np.float32)
    gamma64 = gamma.data.astype(np.float64)

    def bwd(g):
        g64 = g.astype(np.float64)
        dxhat = g64 * gamma64
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        lead = tuple(range(x64.ndim - 1))
        dgamma = (g64 * xhat).sum(axis=lead)
        dbeta = g64.sum(axis=lead)
        return (dx.astype(np.float32), dgamma.astype(np.float32), dbeta.astype(np.float32))

    return _make(y, (x, gamma, beta), bwd, tape)


def gelu(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    y = (x64 * cdf).astype(np.float32)

    def bwd(g):
        pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT_2PI
        return ((g.astype(np.float64) * (cdf + x64 * pdf)).astype(np.float32),)

    return _make(y, (x,), bwd, tape)


# ---------------------------------------------------------------------------
# reductions

def sum_axis(x: Tensor, axis: int, tape: Optional[GradTape] = None) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"sum axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    data = x.data.astype(np.float64).sum(axis=axis).astype(np.float32)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float32).copy(),)

    return _make(data, (x,), bwd, tape)


def sum_all(x: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    data = np.asarray(x.data.astype(np.float64).sum(), dtype=np.float32)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(np.float32).copy(),)

    return _make(data, (x,), bwd, tape)


def l2_diff(a: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """Euclidean norm of (a - b) over all elements.

    The gradient uses the subgradient 0 at the non-differentiable point a == b.
    """
    if a.shape != b.shape:
        raise ContractError(f"l2_diff shapes differ: {a.shape} vs {b.shape}")
    diff64 = a.data.astype(np.float64) - b.data.astype(np.float64)
    norm = float(np.sqrt((diff64 * diff64).sum()))
    data = np.asarray(norm, dtype=np.float32)

    def bwd(g):
        if norm == 0.0:
            z = np.zeros(a.shape, dtype=np.float32)
            return (z, z.copy())
        d = (diff64 / norm * float(g.reshape(()))).astype(np.float32)
        return (d, -d)

    return _make(data, (a, b), bwd, tape)


def linear(x: Tensor, w: Tensor, b: Tensor, tape: Optional[GradTape] = None) -> Tensor:
    """x @ w + b with bias broadcast over leading axes."""
    return add(matmul(x, w, tape), b, tape)
