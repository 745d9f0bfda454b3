"""N-dimensional float64 tensors with reverse-mode automatic differentiation.

Everything the focus network and its losses need runs on this engine:
2D/3D convolution, batch normalization, ReLU, softmax, average pooling,
linear-interpolation upsampling, slicing/stacking/reshaping, reductions,
a masked smooth-L1 loss, and an Adam optimizer.

Conventions:
  - all data is float64, row-major;
  - non-finite values are rejected at tensor construction, so NaN/Inf cannot
    silently escape an operation;
  - gradients accumulate into ``Tensor.grad`` across backward calls until the
    caller zeroes them;
  - convolution forwards accumulate channel-by-kernel-tap in a fixed
    (channel, row, col) order, so small cases agree bit-for-bit with a naive
    triple-loop evaluation.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyMaskError, NumericError, ShapeError

Array = np.ndarray

_grad_enabled = True
_finite_checks = True
_seq_counter = 0


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends graph recording (eval-mode forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied at tensor construction."""
    global _finite_checks
    _finite_checks = bool(enabled)


class Node:
    """One recorded operation: the op name, its inputs, and a backward rule.

    ``seq`` is the global insertion index; a backward sweep visits reachable
    nodes in strictly decreasing ``seq``, i.e. reverse recording order.
    """

    __slots__ = ("op", "inputs", "backward_fn", "seq", "out")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, out: "Tensor"):
        global _seq_counter
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        _seq_counter += 1
        self.seq = _seq_counter
        self.out = weakref.ref(out)


class Tensor:
    """A float64 array with an optional gradient buffer and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a graph node when gradients are live."""
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        out.node = Node(op, inputs, backward_fn, out)
    return out


class ComputationTape:
    """Nodes reachable from a root, ordered by recording (insertion) index."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        nodes = []
        seen = set()
        stack = [root.node] if root.node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append(t.node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)


def _accumulate_grad(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(root: Tensor) -> None:
    """Run a reverse sweep from a scalar root, accumulating into ``grad``.

    Adjoints are transient per call; persistent ``grad`` buffers therefore sum
    across repeated backward calls instead of compounding.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require gradients")
    tape = ComputationTape.from_root(root)
    # entry: [tensor, adjoint array, owned?]; unowned arrays are never mutated
    adjoints = {id(root): [root, np.ones_like(root.data), True]}
    for node in reversed(tape.nodes):
        out = node.out()
        if out is None:
            continue
        entry = adjoints.pop(id(out), None)
        if entry is None:
            continue
        g = entry[1]
        _accumulate_grad(out, g)
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = adjoints.get(id(t))
            if prev is None:
                adjoints[id(t)] = [t, gi, False]
            elif prev[2]:
                prev[1] += gi
            else:
                prev[1] = prev[1] + gi
                prev[2] = True
    for t, g, _ in adjoints.values():
        _accumulate_grad(t, g)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _unbroadcast(g: Array, shape) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = t.data.shape
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gx = g
        if not keepdims:
            gx = np.expand_dims(g, axes)
        return (np.broadcast_to(gx, shape).copy(),)

    return _make(out, "sum", (t,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(t: Tensor, shape) -> Tensor:
    orig = t.data.shape
    return _make(t.data.reshape(shape), "reshape", (t,), lambda g: (g.reshape(orig),))


def slice_(t: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters into zeros."""
    out = t.data[key]
    shape = t.data.shape

    def bwd(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return _make(np.array(out), "slice", (t,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.array(p) for p in np.split(g, splits, axis=axis))

    return _make(out, "concat", tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    base = tensors[0].data.shape
    for i, t in enumerate(tensors):
        if t.data.shape != base:
            raise ShapeError(f"stack: operand {i} has shape {t.data.shape}, expected {base}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, "stack", tensors, bwd)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return _make(np.where(mask, t.data, 0.0), "relu", (t,), lambda g: (g * mask,))


def softmax(t: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if not -t.data.ndim <= axis < t.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {t.data.shape}")
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, "softmax", (t,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _check_conv_args(xshape, wshape, stride, padding, spatial: int, name: str):
    k = wshape[2]
    for e in wshape[2:]:
        if e != k:
            raise ShapeError(f"{name}: kernel must be cubic/square, got {wshape[2:]}")
    if k % 2 == 0:
        raise ShapeError(f"{name}: kernel size must be odd, got {k}")
    if wshape[1] != xshape[1]:
        raise ShapeError(
            f"{name}: weight expects {wshape[1]} input channels, input has {xshape[1]}")
    if stride < 1:
        raise ShapeError(f"{name}: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"{name}: padding must be non-negative, got {padding}")
    for d in range(spatial):
        if xshape[2 + d] + 2 * padding < k:
            raise ShapeError(
                f"{name}: spatial extent {xshape[2 + d]} (+2*{padding} pad) smaller "
                f"than kernel {k}")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation over [B,C,H,W] with an [F,C,k,k] kernel.

    The forward accumulates one (channel, tap-row, tap-col) term at a time, in
    that nesting order, which makes small outputs bit-identical to a naive
    per-pixel triple loop.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [B,C,H,W], got {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [F,C,k,k], got {w.data.shape}")
    _check_conv_args(x.data.shape, w.data.shape, stride, padding, 2, "conv2d")
    B, C, H, W = x.data.shape
    F, _, k, _ = w.data.shape
    if bias is not None and bias.data.shape != (F,):
        raise ShapeError(f"conv2d: bias must have shape ({F},), got {bias.data.shape}")
    s, p = stride, padding
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = w.data
    out = np.zeros((B, F, Ho, Wo))
    tmp = np.empty_like(out)
    for c in range(C):
        xc = xp[:, c]
        for i in range(k):
            rows = slice(i, i + (Ho - 1) * s + 1, s)
            for j in range(k):
                cols = slice(j, j + (Wo - 1) * s + 1, s)
                np.multiply(xc[:, None, rows, cols],
                            wd[None, :, c, i, j, None, None], out=tmp)
                out += tmp
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            gw = np.empty_like(wd)
            for i in range(k):
                rows = slice(i, i + (Ho - 1) * s + 1, s)
                for j in range(k):
                    cols = slice(j, j + (Wo - 1) * s + 1, s)
                    view = xp[:, :, rows, cols]
                    gw[:, :, i, j] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                rows = slice(i, i + (Ho - 1) * s + 1, s)
                for j in range(k):
                    cols = slice(j, j + (Wo - 1) * s + 1, s)
                    contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, rows, cols] += np.moveaxis(contrib, 3, 1)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = (gx, gw) if bias is None else (gx, gw, gb)
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, "conv2d", inputs, bwd)


def conv3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation over [B,C,N,H,W]; same ordering contract as conv2d."""
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d: input must be 5-D [B,C,N,H,W], got {x.data.shape}")
    if w.data.ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-D [F,C,k,k,k], got {w.data.shape}")
    _check_conv_args(x.data.shape, w.data.shape, stride, padding, 3, "conv3d")
    B, C, N, H, W = x.data.shape
    F, _, k, _, _ = w.data.shape
    if bias is not None and bias.data.shape != (F,):
        raise ShapeError(f"conv3d: bias must have shape ({F},), got {bias.data.shape}")
    s, p = stride, padding
    No = (N + 2 * p - k) // s + 1
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    wd = w.data
    out = np.zeros((B, F, No, Ho, Wo))
    tmp = np.empty_like(out)
    for c in range(C):
        xc = xp[:, c]
        for a in range(k):
            deps = slice(a, a + (No - 1) * s + 1, s)
            for i in range(k):
                rows = slice(i, i + (Ho - 1) * s + 1, s)
                for j in range(k):
                    cols = slice(j, j + (Wo - 1) * s + 1, s)
                    np.multiply(xc[:, None, deps, rows, cols],
                                wd[None, :, c, a, i, j, None, None, None], out=tmp)
                    out += tmp
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def bwd(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if w.requires_grad:
            gw = np.empty_like(wd)
            for a in range(k):
                deps = slice(a, a + (No - 1) * s + 1, s)
                for i in range(k):
                    rows = slice(i, i + (Ho - 1) * s + 1, s)
                    for j in range(k):
                        cols = slice(j, j + (Wo - 1) * s + 1, s)
                        view = xp[:, :, deps, rows, cols]
                        gw[:, :, a, i, j] = np.tensordot(
                            g, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(k):
                deps = slice(a, a + (No - 1) * s + 1, s)
                for i in range(k):
                    rows = slice(i, i + (Ho - 1) * s + 1, s)
                    for j in range(k):
                        cols = slice(j, j + (Wo - 1) * s + 1, s)
                        contrib = np.tensordot(g, wd[:, :, a, i, j], axes=([1], [0]))
                        gxp[:, :, deps, rows, cols] += np.moveaxis(contrib, 4, 1)
            gx = gxp[:, :, p:p + N, p:p + H, p:p + W] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(out, "conv3d", inputs, bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class RunningStats:
    """Per-channel running mean/variance used in eval-mode normalization."""

    def __init__(self, num_channels: int):
        self.mean = np.zeros(num_channels)
        self.var = np.ones(num_channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               training: bool, channel_axis: int = 1,
               momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Normalize over all axes but ``channel_axis``.

    Training mode uses batch statistics (biased variance) and updates the
    running buffers in place with the given momentum; eval mode normalizes by
    the running buffers. ``epsilon`` keeps zero-variance channels finite.
    """
    xd = x.data
    C = xd.shape[channel_axis]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(
            f"batch_norm: gamma/beta must have shape ({C},), got "
            f"{gamma.data.shape} and {beta.data.shape}")
    bshape = [1] * xd.ndim
    bshape[channel_axis] = C
    axes = tuple(i for i in range(xd.ndim) if i != channel_axis)
    gr = gamma.data.reshape(bshape)
    br = beta.data.reshape(bshape)

    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        n = xd.size // C
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        stats.var = (1.0 - momentum) * stats.var + momentum * unbiased
        ivar = 1.0 / np.sqrt(var + epsilon)
        ivar_r = ivar.reshape(bshape)
        xhat = (xd - mu.reshape(bshape)) * ivar_r
    else:
        ivar = 1.0 / np.sqrt(stats.var + epsilon)
        ivar_r = ivar.reshape(bshape)
        xhat = (xd - stats.mean.reshape(bshape)) * ivar_r
    out = gr * xhat + br

    def bwd(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gr
            if training:
                gx = ivar_r * (gxh
                               - gxh.mean(axis=axes, keepdims=True)
                               - xhat * (gxh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gxh * ivar_r
        return gx, ggamma, gbeta

    return _make(out, "batch_norm", (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# pooling and upsampling
# ---------------------------------------------------------------------------


def avg_pool(t: Tensor, window) -> Tensor:
    """Non-overlapping average pooling over the trailing len(window) axes.

    Output extent per axis is floor(extent/window); any remainder is dropped
    (and receives zero gradient).
    """
    window = tuple(int(w) for w in window)
    rank = len(window)
    if rank not in (2, 3):
        raise ShapeError(f"avg_pool: window must have 2 or 3 entries, got {window}")
    if any(w <= 0 for w in window):
        raise ShapeError(f"avg_pool: zero-size window {window}")
    xd = t.data
    if xd.ndim < rank:
        raise ShapeError(f"avg_pool: input rank {xd.ndim} below window rank {rank}")
    spatial = xd.shape[-rank:]
    outsp = tuple(e // w for e, w in zip(spatial, window))
    if any(o < 1 for o in outsp):
        raise ShapeError(f"avg_pool: window {window} larger than extents {spatial}")
    lead = xd.shape[:-rank]
    crop = xd[(...,) + tuple(slice(0, o * w) for o, w in zip(outsp, window))]
    blocks = []
    for o, w in zip(outsp, window):
        blocks.extend([o, w])
    rs = crop.reshape(lead + tuple(blocks))
    mean_axes = tuple(range(len(lead) + 1, rs.ndim, 2))
    out = rs.mean(axis=mean_axes)
    scale = 1.0 / np.prod(window)

    def bwd(g):
        gx = np.zeros_like(xd)
        gexp = g * scale
        for d, w in enumerate(window):
            gexp = np.repeat(gexp, w, axis=len(lead) + d)
        gx[(...,) + tuple(slice(0, o * w) for o, w in zip(outsp, window))] = gexp
        return (gx,)

    return _make(out, "avg_pool", (t,), bwd)


def upsample_linear(t: Tensor, size) -> Tensor:
    """Resize the trailing len(size) axes by linear interpolation.

    Uses the align-corners-false convention: source coordinate of output cell
    o is (o + 0.5) * in/out - 0.5, clamped to the valid range. Interpolation
    is applied axis by axis in lerp form v0 + f*(v1-v0), so constant inputs
    are preserved exactly.
    """
    size = tuple(int(m) for m in size)
    rank = len(size)
    if rank not in (2, 3):
        raise ShapeError(f"upsample_linear: size must have 2 or 3 entries, got {size}")
    if any(m < 1 for m in size):
        raise ShapeError(f"upsample_linear: target extents must be >= 1, got {size}")
    if t.data.ndim < rank:
        raise ShapeError(
            f"upsample_linear: input rank {t.data.ndim} below target rank {rank}")
    data = t.data
    plans = []
    for d, m in enumerate(size):
        axis = data.ndim - rank + d
        n = data.shape[axis]
        if n == m:
            plans.append(None)
            continue
        src = np.clip((np.arange(m) + 0.5) * (n / m) - 0.5, 0.0, n - 1.0)
        i0 = np.minimum(src.astype(np.int64), n - 1)
        f = src - i0
        i1 = np.minimum(i0 + 1, n - 1)
        fshape = [1] * data.ndim
        fshape[axis] = m
        v0 = np.take(data, i0, axis=axis)
        v1 = np.take(data, i1, axis=axis)
        data = v0 + f.reshape(fshape) * (v1 - v0)
        plans.append((axis, n, m, i0, i1, f))

    def bwd(g):
        for plan in reversed(plans):
            if plan is None:
                continue
            axis, n, m, i0, i1, f = plan
            gm = np.moveaxis(g, axis, 0)
            fcol = f.reshape((m,) + (1,) * (gm.ndim - 1))
            gin = np.zeros((n,) + gm.shape[1:])
            np.add.at(gin, i0, gm * (1.0 - fcol))
            np.add.at(gin, i1, gm * fcol)
            g = np.moveaxis(gin, 0, axis)
        return (g,)

    if data is t.data:  # every axis already matched; do not alias the input
        data = data.copy()
    return _make(data, "upsample_linear", (t,), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def smooth_l1(pred: Tensor, target: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Mean Huber loss with transition at 1: 0.5*x^2 for |x|<1 else |x|-0.5.

    With a {0,1} mask the mean runs over unmasked elements only; a mask that
    selects nothing raises instead of dividing by zero.
    """
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"smooth_l1: pred shape {pred.data.shape} != target shape {target.data.shape}")
    diff = pred.data - target.data
    absd = np.abs(diff)
    small = absd < 1.0
    elem = np.where(small, 0.5 * diff * diff, absd - 0.5)
    if mask is not None:
        if mask.data.shape != pred.data.shape:
            raise ShapeError(
                f"smooth_l1: mask shape {mask.data.shape} != pred shape {pred.data.shape}")
        md = mask.data
        count = md.sum()
        if count == 0:
            raise EmptyMaskError("smooth_l1: mask selects no elements")
        out = (elem * md).sum() / count
    else:
        md = None
        count = pred.data.size
        out = elem.mean()

    def bwd(g):
        dd = np.where(small, diff, np.sign(diff))
        if md is not None:
            dd = dd * md
        gp = g * dd / count
        inputs_grad = [gp if pred.requires_grad else None,
                       -gp if target.requires_grad else None]
        if mask is not None:
            inputs_grad.append(None)
        return tuple(inputs_grad)

    inputs = (pred, target) if mask is None else (pred, target, mask)
    return _make(np.asarray(out), "smooth_l1", inputs, bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment buffers; ``m``/``v`` align positionally with the params."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0.0 or self.epsilon <= 0.0:
            raise ValueError("Adam lr and epsilon must be positive")


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to every param with a gradient."""
    params = list(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(
            f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
