"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op lives here as a module-level function taking and
returning :class:`Tensor`.  Ops record a parent list and a backward closure
only when some input requires a gradient and recording is enabled (see
:func:`no_grad`).  Arrays are numpy ``float64`` throughout.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_RECORD = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible tensor dimensions."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _RECORD
    prev = _RECORD
    _RECORD = False
    try:
        yield
    finally:
        _RECORD = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        if not np.isfinite(arr).all():
            label = name or op
            raise NonFiniteError(f"non-finite values in tensor produced by '{label}'")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- metadata ---------------------------------------------------------
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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _RECORD and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in forward (creation) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Leaf gradients accumulate across calls; call ``zero_grad`` between
    steps.  Intermediate gradients are freed after use.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        # hand the incoming gradient to the closure via the parents' slots
        node._backward(g, grads)


def _send(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g, grads):
        _send(grads, a, _unbroadcast(g, a.shape))
        _send(grads, b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g, grads):
        _send(grads, a, _unbroadcast(g, a.shape))
        _send(grads, b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g, grads):
        if a.requires_grad:
            _send(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _send(grads, b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bw(g, grads):
        _send(grads, x, g * c)

    return _make(out, (x,), bw, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g, grads):
        _send(grads, x, g * mask)

    return _make(out, (x,), bw, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def bw(g, grads):
        _send(grads, x, g * s * (1.0 - s))

    return _make(s, (x,), bw, "sigmoid")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    out = np.log(x.data)

    def bw(g, grads):
        _send(grads, x, g / x.data)

    return _make(out, (x,), bw, "log")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi

    def bw(g, grads):
        _send(grads, x, g * inside)

    return _make(out, (x,), bw, "clamp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g, grads):
        _send(grads, x, g * 0.5 / out)

    return _make(out, (x,), bw, "sqrt")


def dropout(x: Tensor, p: float, rng: np.random.Generator | int | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def bw(g, grads):
        _send(grads, x, g * keep)

    return _make(out, (x,), bw, "dropout")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g, grads):
        _send(grads, x, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        _send(grads, x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def bw(g, grads):
        _send(grads, x, g.reshape(x.shape))

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g, grads):
        _send(grads, x, g.transpose(inv))

    return _make(out, (x,), bw, "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (materialized copy)."""
    try:
        out = np.array(np.broadcast_to(x.data, tuple(shape)))
    except ValueError as exc:
        raise ShapeError(f"cannot expand {x.shape} to {tuple(shape)}") from exc

    def bw(g, grads):
        _send(grads, x, _unbroadcast(g, x.shape))

    return _make(out, (x,), bw, "expand")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def bw(g, grads):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _send(grads, x, full)

    return _make(out, (x,), bw, "getitem")


def take(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; output shape follows ``flat_indices``."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    out = x.data.reshape(-1)[idx]

    def bw(g, grads):
        full = np.zeros(x.size)
        np.add.at(full, idx.reshape(-1), g.reshape(-1))
        _send(grads, x, full.reshape(x.shape))

    return _make(out, (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, grads):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _send(grads, t, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in tensors]}") from exc

    def bw(g, grads):
        for i, t in enumerate(tensors):
            _send(grads, t, np.take(g, i, axis=axis))

    return _make(out, tensors, bw, "stack")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        gk = g if keepdims else np.expand_dims(g, axes)
        _send(grads, x, np.broadcast_to(gk, x.shape).copy())

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over an arbitrary subset of axes (all axes by default)."""
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g, grads):
        gk = g if keepdims else np.expand_dims(g, axes)
        _send(grads, x, np.broadcast_to(gk / count, x.shape).copy())

    return _make(out, (x,), bw, "mean")


def convex_mix(s: Tensor, x: Tensor, z: Tensor) -> Tensor:
    """``(1 - z) * s + z * x`` elementwise, guarded against round-off.

    The exact result always lies in ``[min(s, x), max(s, x)]``; in floating
    point it can land one ulp outside (``(1 - z) * v + z * v != v`` for about
    one draw in twenty), so the output is clamped to that interval.  The
    gradient is that of the unclamped formula.  ``z == 1`` returns ``x``
    bitwise.
    """
    if not (s.shape == x.shape == z.shape):
        raise ShapeError(f"convex_mix: shapes {s.shape}, {x.shape}, {z.shape} differ")
    out = (1.0 - z.data) * s.data + z.data * x.data
    out = np.clip(out, np.minimum(s.data, x.data), np.maximum(s.data, x.data))

    def bw(g, grads):
        _send(grads, s, g * (1.0 - z.data))
        _send(grads, x, g * z.data)
        _send(grads, z, g * (x.data - s.data))

    return _make(out, (s, x, z), bw, "convex_mix")


def shifted_mean(x: Tensor) -> Tensor:
    """Mean of a 1-D tensor computed as ``x[0] + mean(x - x[0])``.

    Same value and gradient as :func:`mean` up to rounding, but exact when all
    entries are equal (a plain mean of n copies of 0.4 is not 0.4).
    """
    if x.ndim != 1 or x.shape[0] == 0:
        raise ShapeError(f"shifted_mean expects a non-empty vector, got {x.shape}")
    ref = x.data[0]
    out = np.asarray(ref + (x.data - ref).mean())
    n = x.shape[0]

    def bw(g, grads):
        _send(grads, x, np.full(x.shape, g / n))

    return _make(out, (x,), bw, "shifted_mean")


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is [d_out, d_in]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g, grads):
        if x.requires_grad:
            _send(grads, x, g @ w.data)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _send(grads, w, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            _send(grads, b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, bw, "dense")


def _conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, pad: int, nsp: int, opname: str) -> Tensor:
    """Cross-correlation over ``nsp`` trailing spatial axes.

    ``x`` is [C_in, *S] or [B, C_in, *S]; ``w`` is [C_out, C_in, *K].  Works
    channels-last internally: one im2col GEMM forward, one GEMM plus a
    fixed-order col2im scatter backward.
    """
    if stride < 1 or pad < 0:
        raise ValueError(f"{opname}: need stride >= 1 and pad >= 0")
    unbatched = x.ndim == nsp + 1
    if x.ndim not in (nsp + 1, nsp + 2) or w.ndim != nsp + 2:
        raise ShapeError(f"{opname}: bad ranks input {x.shape}, weight {w.shape}")
    xd = x.data[None] if unbatched else x.data
    bsz, cin = xd.shape[:2]
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise ShapeError(f"{opname}: input has {cin} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{opname}: bias {b.shape} does not match {cout} filters")
    ksz = tuple(w.shape[2:])
    spatial = xd.shape[2:]
    out_sz = []
    for n, k in zip(spatial, ksz):
        span = n + 2 * pad - k
        if span < 0:
            raise ShapeError(f"{opname}: kernel {ksz} larger than padded input {spatial} (pad {pad})")
        out_sz.append(span // stride + 1)
    out_sz = tuple(out_sz)
    nk = int(np.prod(ksz))
    npos = bsz * int(np.prod(out_sz))

    xl = np.moveaxis(xd, 1, -1)  # [B, *S, C]
    if pad:
        xl = np.pad(xl, [(0, 0)] + [(pad, pad)] * nsp + [(0, 0)])
    sp_axes = tuple(range(1, nsp + 1))
    win = np.lib.stride_tricks.sliding_window_view(xl, ksz, axis=sp_axes)  # [B, *S', C, *K]
    win = win[(slice(None),) + (slice(None, None, stride),) * nsp]
    perm = (0,) + sp_axes + tuple(range(nsp + 2, 2 * nsp + 2)) + (nsp + 1,)
    cols = win.transpose(perm).reshape(npos, nk * cin)  # rows: positions, cols: (K..., C)
    wmat = np.moveaxis(w.data, 1, -1).reshape(cout, nk * cin)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape((bsz,) + out_sz + (cout,)), -1, 1))
    if unbatched:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)
    padded_shape = xl.shape

    def bw(g, grads):
        gb = g[None] if unbatched else g
        g2 = np.moveaxis(gb, 1, -1).reshape(npos, cout)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape((bsz,) + out_sz + (nk, cin))
            dcols = np.ascontiguousarray(np.moveaxis(dcols, nsp + 1, 0))  # [nK, B, *out, C]
            dxl = np.zeros(padded_shape)
            for i, off in enumerate(itertools.product(*[range(k) for k in ksz])):
                region = (slice(None),) + tuple(
                    slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sz)
                )
                dxl[region] += dcols[i]
            if pad:
                dxl = dxl[(slice(None),) + tuple(slice(pad, pad + n) for n in spatial)]
            dx = np.ascontiguousarray(np.moveaxis(dxl, -1, 1))
            _send(grads, x, dx[0] if unbatched else dx)
        if w.requires_grad:
            dw = (g2.T @ cols).reshape((cout,) + ksz + (cin,))
            _send(grads, w, np.ascontiguousarray(np.moveaxis(dw, -1, 1)))
        if b is not None and b.requires_grad:
            _send(grads, b, g2.sum(axis=0))

    return _make(out, parents, bw, opname)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv(x, w, b, stride, pad, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    return _conv(x, w, b, stride, pad, 3, "conv3d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            momentum,
            eps,
        )


def batchnorm(x: Tensor, state: BatchNormState, training: bool, axis: int = 1) -> Tensor:
    """Normalize per channel along ``axis`` with statistics over all other axes.

    In training mode the batch statistics are used and the running
    estimates are updated in place (unbiased variance).  In eval mode the
    running estimates are used.
    """
    axis = axis % x.ndim
    c = x.shape[axis]
    if state.gamma.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma has shape {state.gamma.shape}")
    red = tuple(a for a in range(x.ndim) if a != axis)
    bshape = [1] * x.ndim
    bshape[axis] = c
    gamma = state.gamma.data.reshape(bshape)
    beta = state.beta.data.reshape(bshape)
    if training:
        n = x.size // c
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mu.reshape(c)
        unbiased = var.reshape(c) * (n / (n - 1)) if n > 1 else var.reshape(c)
        state.running_var *= 1.0 - m
        state.running_var += m * unbiased
    else:
        n = None
        xc = x.data - state.running_mean.reshape(bshape)
        var = state.running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = gamma * xhat + beta

    def bw(g, grads):
        if state.gamma.requires_grad:
            _send(grads, state.gamma, (g * xhat).sum(axis=red))
        if state.beta.requires_grad:
            _send(grads, state.beta, g.sum(axis=red))
        if x.requires_grad:
            gx = g * gamma
            if training:
                gm = gx.mean(axis=red, keepdims=True)
                gxm = (gx * xhat).mean(axis=red, keepdims=True)
                dx = inv * (gx - gm - xhat * gxm)
            else:
                dx = gx * inv
            _send(grads, x, dx)

    return _make(out, (x, state.gamma, state.beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# metric helpers
# ---------------------------------------------------------------------------

def pairwise_distance(x: Tensor) -> Tensor:
    """Euclidean distance matrix between rows of ``x`` [M, d].

    The derivative at a zero distance is taken as zero.
    """
    if x.ndim != 2:
        raise ShapeError(f"pairwise_distance expects [M, d], got {x.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def bw(g, grads):
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, g / safe, 0.0)
        coef = coef + coef.T
        _send(grads, x, (coef[:, :, None] * diff).sum(axis=1))

    return _make(dist, (x,), bw, "pairwise_distance")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""
    checked: int = 0
    retried: int = 0  # coordinates that only agreed at a smaller step


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-5,
    shrink_steps: int = 2,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing ``inputs`` in place, so it must
    close over them.  With ``max_coords`` only that many randomly chosen
    coordinates per input are checked.  The relative error of a coordinate
    is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off in the
    numeric estimate of an exactly-zero gradient (dead ReLU units, say) from
    reading as a large relative error.

    A coordinate whose error exceeds ``tol`` at step ``h`` is retried with
    steps ``h/10``, ``h/100``, ... (``shrink_steps`` of them) and scored by
    its best step.  That forgives a ReLU or hinge switching inside the
    +-h interval, while a wrong gradient disagrees at every step size.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = [h / 10 ** j for j in range(shrink_steps + 1)]
    worst, worst_at, checked, retried = 0.0, "", 0, 0
    with no_grad():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                a = analytic[k].reshape(-1)[i]
                orig = flat[i]
                best, best_num = np.inf, np.nan
                for j, step in enumerate(steps):
                    flat[i] = orig + step
                    fp = f().item()
                    flat[i] = orig - step
                    fm = f().item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * step)
                    rel = float(abs(a - num) / max(abs(a), abs(num), floor))
                    if rel < best:
                        best, best_num = rel, num
                    if best < tol:
                        retried += j > 0
                        break
                checked += 1
                if best > worst:
                    worst = best
                    worst_at = f"{t.name or f'input{k}'}[{int(i)}] analytic={a:.6e} numeric={best_num:.6e}"
    for t in inputs:
        t.grad = None
    return GradcheckReport(float(worst), bool(worst < tol), worst_at, checked, retried)
