"""Dense tensors with a reverse-mode autodiff tape.

Storage is a numpy array (row-major). Every differentiable op records its
parents and a closure that pushes the output gradient back to them; calling
``backward`` on a scalar walks the recorded graph in reverse topological
order. Only first-order gradients are supported.

Shapes follow the ``(..., L, d)`` convention: the last axis is features, the
second to last is time, anything in front is batch (and heads).
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Rng:
    """Seeded, reproducible random stream (PCG64)."""

    algorithm = "PCG64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def uniform(self, low, high, shape) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.PCG64(0 if rng is None else int(rng)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate grads are not needed once propagated
                    node.grad = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
    else:
        node.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a tensor op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar or a constant array."""
    if not isinstance(b, Tensor):
        const = b if np.isscalar(b) else np.asarray(b, dtype=a.dtype)

        def backward_const(g):
            _accumulate(a, _unbroadcast(g * const, a.shape))

        return _result(a.data * const, (a,), backward_const)

    a = _lift(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a: Tensor, divisor) -> Tensor:
    """Divide by a python scalar or constant array (broadcast)."""
    const = divisor if np.isscalar(divisor) else np.asarray(divisor, dtype=a.dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g / const, a.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / const
    return _result(out, (a,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, 2.0 * g * x.data)

    return _result(x.data * x.data, (x,), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / count, x.shape))

    return _result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def cumsum(x: Tensor, axis: int = -2) -> Tensor:
    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accumulate(x, rev)

    return _result(np.cumsum(x.data, axis=axis), (x,), backward)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _result(np.array(np.broadcast_to(x.data, shape)), (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, key) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[key] += g
        _accumulate(x, full)

    return _result(np.array(x.data[key]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along the time axis; ``index`` has shape ``(..., n)``."""
    idx = np.asarray(index)[..., None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, _row_address(full.shape, index), g)
        _accumulate(x, full)

    return _result(np.take_along_axis(x.data, idx, axis=-2), (x,), backward)


def _row_address(shape: tuple, index: np.ndarray) -> tuple:
    lead = shape[:-2]
    grids = np.meshgrid(*[np.arange(n) for n in lead], indexing="ij") if lead else []
    addr = [gr.reshape(gr.shape + (1,)) for gr in grids]
    return tuple(np.broadcast_arrays(*addr, np.asarray(index))) if addr else (np.asarray(index),)


def replace_rows(base: Tensor, index: np.ndarray, rows: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Return ``base`` with rows ``index`` (along the time axis) overwritten by ``rows``.

    ``valid`` marks which entries of ``index`` are real; padded entries must
    repeat a valid index of the same slice and carry identical row values.
    """
    idx = np.asarray(index)
    out = base.data.copy()
    np.put_along_axis(out, idx[..., None], rows.data, axis=-2)

    def backward(g):
        gb = g.copy()
        np.put_along_axis(gb, idx[..., None], 0.0, axis=-2)
        _accumulate(base, gb)
        gr = np.take_along_axis(g, idx[..., None], axis=-2)
        if valid is not None:
            gr = gr * valid[..., None]
        _accumulate(rows, gr)

    return _result(out, (base, rows), backward)


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; gradients scatter-add back into the table."""
    index = np.asarray(index)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        _accumulate(table, full)

    return _result(table.data[index], (table,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: one flat product instead of a batched one plus a sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accumulate(b, gb)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum evaluated without BLAS.

    Each output element is reduced in a fixed order that does not depend on
    how many other rows are present, which keeps row results bit-stable when
    a variable number of rows is computed.
    """
    inputs, output = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.einsum(f"{output},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            _accumulate(b, np.einsum(f"{output},{sa}->{sb}", g, a.data))

    return _result(np.einsum(subscripts, a.data, b.data), (a, b), backward)


def rowwise_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` computed as one vector-matrix product per row of ``a``.

    Each row goes through an identically shaped product, so its value does not
    depend on how many rows ``a`` has.
    """
    a = _lift(a)
    b = _lift(b, a)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data[..., :, None, :], b.data[..., None, :, :])[..., 0, :]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) removes entries."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def elu(x: Tensor) -> Tensor:
    neg = np.expm1(np.minimum(x.data, 0.0))
    y = np.where(x.data > 0, x.data, neg)

    def backward(g):
        _accumulate(x, g * np.where(x.data > 0, 1.0, neg + 1.0))

    return _result(y.astype(x.dtype, copy=False), (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner))

    return _result(y, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    kind = kind.lower()
    if kind == "elu":
        return elu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'elu' or 'gelu'")


def layernorm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gain.data + offset.data

    def backward(g):
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(offset, _unbroadcast(g, offset.shape))

    return _result(y, (x, gain, offset), backward)


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = as_generator(rng).random(x.shape) >= p
    return mul(x, keep.astype(x.dtype) / (1.0 - p))


# ---------------------------------------------------------------------------
# temporal convolution and pooling
# ---------------------------------------------------------------------------

def pad_time(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the time axis by ``pad`` steps on both ends (zeros or edge replication)."""
    if pad == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[-2] = (pad, pad)
    if mode == "zeros":
        data = np.pad(x.data, widths)
    elif mode == "replicate":
        data = np.pad(x.data, widths, mode="edge")
    else:
        raise ValueError(f"unknown padding mode {mode!r}")

    def backward(g):
        inner = g[..., pad:-pad, :].copy()
        if mode == "replicate":
            inner[..., :1, :] += g[..., :pad, :].sum(axis=-2, keepdims=True)
            inner[..., -1:, :] += g[..., -pad:, :].sum(axis=-2, keepdims=True)
        _accumulate(x, inner)

    return _result(data, (x,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "zeros") -> Tensor:
    """1-D convolution along time.

    ``x`` is ``(..., L, d_in)``, ``weight`` is ``(k, d_in, d_out)`` with odd
    ``k``. ``padding`` is ``"zeros"`` or ``"replicate"`` (both length
    preserving) or ``"valid"``.
    """
    k, d_in, d_out = weight.shape
    if k % 2 == 0:
        raise DimensionError(f"conv1d kernel width must be odd, got {k}")
    if x.shape[-1] != d_in:
        raise DimensionError(f"conv1d expects {d_in} input channels, got {x.shape[-1]}")
    xp = x if padding == "valid" else pad_time(x, k // 2, padding)
    length = xp.shape[-2] - k + 1
    if length < 1:
        raise DimensionError(f"kernel width {k} exceeds padded input length {xp.shape[-2]}")
    cols = np.concatenate([xp.data[..., i:i + length, :] for i in range(k)], axis=-1)
    w2 = weight.data.reshape(k * d_in, d_out)

    def backward(g):
        if xp.requires_grad:
            gcols = g @ w2.T
            gxp = np.zeros_like(xp.data)
            for i in range(k):
                gxp[..., i:i + length, :] += gcols[..., i * d_in:(i + 1) * d_in]
            _accumulate(xp, gxp)
        if weight.requires_grad:
            gw = cols.reshape(-1, k * d_in).T @ g.reshape(-1, d_out)
            _accumulate(weight, gw.reshape(weight.shape))

    out = _result(cols @ w2, (xp, weight), backward)
    return out if bias is None else add(out, bias)


def pool_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def maxpool1d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Per-channel max over time windows; padding uses a -inf sentinel."""
    if kernel < 1 or stride < 1:
        raise DimensionError("maxpool kernel and stride must be positive")
    if padding > kernel // 2:
        raise DimensionError(f"maxpool padding {padding} exceeds half the kernel {kernel}")
    length = pool_length(x.shape[-2], kernel, stride, padding)
    if length < 1:
        raise DimensionError(f"maxpool kernel {kernel} longer than input {x.shape[-2]}")
    widths = [(0, 0)] * x.ndim
    widths[-2] = (padding, padding)
    xp = np.pad(x.data, widths, constant_values=-np.inf)
    span = stride * (length - 1) + 1
    windows = np.stack([xp[..., o:o + span:stride, :] for o in range(kernel)], axis=-1)
    arg = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        for o in range(kernel):
            gxp[..., o:o + span:stride, :] += np.where(arg == o, g, 0.0)
        _accumulate(x, gxp[..., padding:padding + x.shape[-2], :])

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
