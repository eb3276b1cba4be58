"""Minimal numpy-backed tensors with reverse-mode autodiff.

Storage is always float32. Matrix products and reductions accumulate in
float64 and round once on the way out, which keeps long attention sums
stable without doubling memory. Any op whose output contains NaN or inf
raises NumericError at the op itself, so bad values cannot propagate
silently.

The autodiff is a classic tape: each op records its parent tensors and a
closure that maps the output gradient to parent gradients. `backward()`
topologically sorts the graph reachable from a scalar loss and runs the
closures in reverse. Ops executed inside `no_grad()` record nothing.

Only the operations the model needs are provided. Broadcasting is
supported where numpy allows it, with gradients summed back over the
broadcast axes.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, NumericError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """float32 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; tensor operands only, use scale/add_const for scalars
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Reverse-mode pass from a scalar. Accumulates into .grad."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None:
        return
    g = np.asarray(g, dtype=np.float32)
    _check_finite(g, "backward")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data.astype(np.float32, copy=False)
    out.grad = None
    track = _grad_enabled and any(p.requires_grad or p._backward is not None
                                  for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back, "mul")


def add_const(x: Tensor, c: float) -> Tensor:
    data = x.data + np.float32(c)

    def back(g):
        _accum(x, g)

    return _make(data, (x,), back, "add_const")


def scale(x: Tensor, s: float) -> Tensor:
    s = np.float32(s)
    data = x.data * s

    def back(g):
        _accum(x, g * s)

    return _make(data, (x,), back, "scale")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), with the sigmoid evaluated branch-stably."""
    xd = x.data
    sig = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                   np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    sig = sig.astype(np.float32)
    data = xd * sig

    def back(g):
        _accum(x, g * (sig * (1.0 + xd * (1.0 - sig))))

    return _make(data, (x,), back, "silu")


# -- matmul and reshapes ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n, k) @ (k, m) or batched (h, n, k) @ (h, k, m); f64 accumulation."""
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    else:
        raise DimensionError(f"matmul: rank {a.ndim} @ rank {b.ndim}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    data = (a64 @ b64).astype(np.float32)

    def back(g):
        g64 = g.astype(np.float64)
        _accum(a, (g64 @ b64.swapaxes(-1, -2)).astype(np.float32))
        _accum(b, (a64.swapaxes(-1, -2) @ g64).astype(np.float32))

    return _make(data, (a, b), back, "matmul")


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2 on rank {x.ndim}")
    data = np.ascontiguousarray(x.data.swapaxes(-1, -2))

    def back(g):
        _accum(x, g.swapaxes(-1, -2))

    return _make(data, (x,), back, "transpose_last2")


def to_heads(x: Tensor, heads: int) -> Tensor:
    """(n, h*d) -> (h, n, d)."""
    n, dim = x.shape
    if dim % heads:
        raise DimensionError(f"to_heads: {dim} not divisible by {heads}")
    d = dim // heads
    data = np.ascontiguousarray(x.data.reshape(n, heads, d).transpose(1, 0, 2))

    def back(g):
        _accum(x, g.transpose(1, 0, 2).reshape(n, dim))

    return _make(data, (x,), back, "to_heads")


def from_heads(x: Tensor) -> Tensor:
    """(h, n, d) -> (n, h*d)."""
    if x.ndim != 3:
        raise DimensionError(f"from_heads on rank {x.ndim}")
    h, n, d = x.shape
    data = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(n, h * d)

    def back(g):
        _accum(x, g.reshape(n, h, d).transpose(1, 0, 2))

    return _make(data, (x,), back, "from_heads")


# -- reductions and normalizers ---------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(dtype=np.float64), dtype=np.float32)

    def back(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), back, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise DimensionError("mean_all of empty tensor")
    data = np.asarray(x.data.mean(dtype=np.float64), dtype=np.float32)

    def back(g):
        _accum(x, np.broadcast_to(g / np.float32(n), x.data.shape))

    return _make(data, (x,), back, "mean_all")


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps); no learned affine."""
    x64 = x.data.astype(np.float64)
    n = x.shape[-1]
    ms = (x64 * x64).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    data = (x64 * inv).astype(np.float32)

    def back(g):
        g64 = g.astype(np.float64)
        dot = (x64 * g64).mean(axis=-1, keepdims=True)
        gx = inv * (g64 - x64 * dot * inv * inv)
        _accum(x, gx.astype(np.float32))

    return _make(data, (x,), back, "rms_normalize")


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax over the last axis, max-shifted, f64 normalizer."""
    x64 = x.data.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=-1, keepdims=True)
    data = y64.astype(np.float32)

    def back(g):
        g64 = g.astype(np.float64)
        dot = (y64 * g64).sum(axis=-1, keepdims=True)
        _accum(x, (y64 * (g64 - dot)).astype(np.float32))

    return _make(data, (x,), back, "softmax_rows")


# -- gathers, concats, slices -----------------------------------------------

def _as_index(idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"row index must be 1-D, got shape {idx.shape}")
    return idx


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along axis -2; works for (n, d) and (h, n, d)."""
    idx = _as_index(idx)
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")
    data = np.take(x.data, idx, axis=-2)

    def back(g):
        gx = np.zeros_like(x.data)
        if x.ndim == 2:
            np.add.at(gx, idx, g)
        else:
            np.add.at(gx, (slice(None), idx), g)
        _accum(x, gx)

    return _make(data, (x,), back, "gather_rows")


def index_add_rows(x: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of x with rows added at idx along axis 0; 2-D only."""
    idx = _as_index(idx)
    if x.ndim != 2 or rows.ndim != 2:
        raise DimensionError("index_add_rows expects 2-D tensors")
    if rows.shape[0] != idx.size or rows.shape[1] != x.shape[1]:
        raise DimensionError(
            f"index_add_rows: rows {rows.shape} vs idx {idx.size} and x {x.shape}")
    data = x.data.copy()
    np.add.at(data, idx, rows.data)

    def back(g):
        _accum(x, g)
        _accum(rows, g[idx])

    return _make(data, (x, rows), back, "index_add_rows")


def concat_rows(parts) -> Tensor:
    """Concatenate along axis -2."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_rows of nothing")
    data = np.concatenate([p.data for p in parts], axis=-2)
    sizes = [p.shape[-2] for p in parts]

    def back(g):
        off = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[-2] = slice(off, off + s)
            _accum(p, g[tuple(sl)])
            off += s

    return _make(data, tuple(parts), back, "concat_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop] on the last axis."""
    if not (0 <= start <= stop <= x.shape[-1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] on width {x.shape[-1]}")
    data = np.ascontiguousarray(x.data[..., start:stop])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        _accum(x, gx)

    return _make(data, (x,), back, "slice_cols")


# -- rotary -----------------------------------------------------------------

def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved (even, odd) feature pairs by per-position angles.

    x (h, n, d) or (n, d) with d even; cos/sin (n, d/2), constants.
    """
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rotate_pairs needs even width, got {d}")
    if cos.shape != (x.shape[-2], d // 2) or sin.shape != cos.shape:
        raise DimensionError(
            f"rotate_pairs: angle shape {cos.shape} vs tokens {x.shape}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = xe * cos - xo * sin
    data[..., 1::2] = xe * sin + xo * cos

    def back(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        _accum(x, gx)

    return _make(data, (x,), back, "rotate_pairs")
