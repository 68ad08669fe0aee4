"""Dense tensors with reverse-mode differentiation.

Wide precision (float64) is the default and is what the test suite pins its
tolerances to; narrow precision (float32) is available for training speed.
Primitives fix their floating-point evaluation order, so identical inputs
produce bit-identical outputs on a given platform.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WIDE = np.float64
NARROW = np.float32

# Above this many multiply-accumulates, correlate2d switches from the
# reference accumulation order to an im2col/GEMM evaluation.  Small inputs
# (everything the loop-oracle tests cover) always take the reference path.
GEMM_WORK_THRESHOLD = 1_000_000

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward evaluation only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional array with an optional gradient accumulator.

    Leaves are tensors created directly (parameters, inputs); interior nodes
    carry a closure that maps the incoming adjoint to per-parent adjoints.
    ``backward`` accumulates gradients additively into ``grad`` of every
    ``requires_grad`` leaf reachable from the loss; repeated calls without
    ``zero_grad`` keep accumulating.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(WIDE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Visits nodes in exact reverse topological order; fan-out adjoints
        are accumulated additively before a node is processed.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p._backward is not None or p.requires_grad):
                    stack.append((p, False))

        adjoints = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if parent._backward is None and not parent.requires_grad:
                    continue
                key = id(parent)
                adjoints[key] = pg if key not in adjoints else adjoints[key] + pg

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

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
        return div(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad=False, dtype=None):
    """Create a leaf tensor; dtype defaults to float64 (wide precision)."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(WIDE)
    return Tensor(arr, requires_grad=requires_grad)


def reset_grads(tensors):
    """Clear accumulated gradients on the given tensors."""
    for t in tensors:
        t.zero_grad()


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else WIDE
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    if _grad_enabled and any(
        p.requires_grad or p._backward is not None for p in parents
    ):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Reduce an adjoint back to the operand shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), backward)


def scale(a, s):
    """Multiply by a python scalar."""
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _node(a.data * s, (a,), backward)


def add_scalar(a, s):
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        return (g,)

    return _node(a.data + s, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def backward(g):
        return (g * mask,)

    return _node(out, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), backward)


def log(a):
    a = _as_tensor(a)
    bad = ~(a.data > 0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(
            f"log requires positive inputs; value {a.data[idx]!r} at index {idx}"
        )
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape and reduction primitives


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _node(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def backward(g):
        gk = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        return (np.broadcast_to(gk / count, a.data.shape).copy(),)

    return _node(out, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), backward)


def take_segment(a, start, stop):
    """Contiguous slice [start, stop) of the flattened tensor."""
    a = _as_tensor(a)
    start, stop = int(start), int(stop)
    if not (0 <= start <= stop <= a.data.size):
        raise ValueError(f"segment [{start}, {stop}) out of range for size {a.data.size}")
    out = a.data.reshape(-1)[start:stop].copy()

    def backward(g):
        gx = np.zeros(a.data.size, dtype=a.data.dtype)
        gx[start:stop] = g
        return (gx.reshape(a.data.shape),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# normalization primitives


def softmax(a, axis):
    """Numerically stable softmax along one axis.

    Subtracts the per-slice maximum before exponentiation; rejects
    non-finite inputs, naming the first offending index.
    """
    a = _as_tensor(a)
    bad = ~np.isfinite(a.data)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(
            f"softmax requires finite inputs; value {a.data[idx]!r} at index {idx}"
        )
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), backward)


def l2_norm(a, axis, epsilon=1e-8, keepdims=False):
    """sqrt(sum of squares + epsilon^2) along ``axis``.

    Strictly positive for epsilon > 0, which keeps the gradient finite at
    the zero vector.
    """
    a = _as_tensor(a)
    eps = float(epsilon)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    normk = np.sqrt(sq + eps * eps)
    out = normk if keepdims else np.squeeze(normk, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * a.data / normk,)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# spatial primitives


def max_pool_window(a, window, stride):
    """Window maximum over the trailing two axes, then stride subsampling.

    Ties within a window route the gradient to the first (row-major)
    maximum, which keeps backward deterministic.
    """
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ValueError(f"max_pool_window needs >= 2 dims, got {a.data.shape}")
    window = int(window)
    stride = int(stride)
    *lead, H, W = a.data.shape
    if window > H or window > W:
        raise ValueError(
            f"pool window {window} exceeds spatial extents ({H}, {W})"
        )
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    n_lead = int(np.prod(lead)) if lead else 1
    xf = a.data.reshape(n_lead, H, W)
    win = sliding_window_view(xf, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(n_lead, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = out.reshape(tuple(lead) + (Ho, Wo))

    def backward(g):
        gf = g.reshape(n_lead, Ho, Wo)
        gx = np.zeros(n_lead * H * W, dtype=a.data.dtype)
        n_idx, yo_idx, xo_idx = np.meshgrid(
            np.arange(n_lead), np.arange(Ho), np.arange(Wo), indexing="ij"
        )
        rows = yo_idx * stride + arg // window
        cols = xo_idx * stride + arg % window
        flat_idx = (n_idx * H + rows) * W + cols
        np.add.at(gx, flat_idx.reshape(-1), gf.reshape(-1))
        return (gx.reshape(a.data.shape),)

    return _node(out, (a,), backward)


def _corr2d_reference(xp, w, stride, Ho, Wo):
    # Accumulates in (channel, kernel-row, kernel-col) order; per output
    # cell this is bit-identical to a scalar quadruple loop.
    N = xp.shape[0]
    O, C, kH, kW = w.shape
    out = np.zeros((N, O, Ho, Wo), dtype=xp.dtype)
    for c in range(C):
        for u in range(kH):
            for v in range(kW):
                patch = xp[:, c, u : u + stride * Ho : stride, v : v + stride * Wo : stride]
                out += patch[:, None, :, :] * w[:, c, u, v][None, :, None, None]
    return out


def _corr2d_gemm(xp, w, stride, Ho, Wo):
    win = sliding_window_view(xp, (w.shape[2], w.shape[3]), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=((1, 4, 5), (1, 2, 3)))  # [N, Ho, Wo, O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def correlate2d(a, kernels, stride=1, padding=0):
    """Cross-correlation of a (optionally batched) multi-channel image.

    ``a`` is [C, H, W] or [N, C, H, W]; ``kernels`` is [O, C, kH, kW].
    Zero padding; out-of-range input reads as 0.  Differentiable with
    respect to both arguments.
    """
    a = _as_tensor(a)
    kernels = _as_tensor(kernels, like=a)
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if kernels.data.ndim != 4:
        raise ValueError(
            f"kernels must be [out, in, kH, kW], got shape {kernels.data.shape}"
        )
    batched = a.data.ndim == 4
    if not batched and a.data.ndim != 3:
        raise ValueError(
            f"input must be [C, H, W] or [N, C, H, W], got shape {a.data.shape}"
        )
    x = a.data if batched else a.data[None]
    N, C, H, W = x.shape
    O, Ck, kH, kW = kernels.data.shape
    if Ck != C:
        raise ValueError(
            f"channel mismatch: input has {C} channels (shape {a.data.shape}), "
            f"kernels expect {Ck} (shape {kernels.data.shape})"
        )
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kH > Hp or kW > Wp:
        raise ValueError(
            f"kernel ({kH}, {kW}) exceeds padded input ({Hp}, {Wp}) "
            f"for input shape {a.data.shape}, padding {padding}"
        )
    Ho = (Hp - kH) // stride + 1
    Wo = (Wp - kW) // stride + 1
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    w = kernels.data
    work = N * O * Ho * Wo * C * kH * kW
    if work <= GEMM_WORK_THRESHOLD:
        out = _corr2d_reference(xp, w, stride, Ho, Wo)
    else:
        out = _corr2d_gemm(xp, w, stride, Ho, Wo)

    def backward(g):
        gb = g if batched else g[None]
        win = sliding_window_view(xp, (kH, kW), axis=(2, 3))[:, :, ::stride, ::stride]
        gw = np.tensordot(gb, win, axes=((0, 2, 3), (0, 2, 3)))
        t = np.tensordot(gb, w, axes=(1, 0))  # [N, Ho, Wo, C, kH, kW]
        gxp = np.zeros((N, C, Hp, Wp), dtype=xp.dtype)
        for u in range(kH):
            for v in range(kW):
                gxp[:, :, u : u + stride * Ho : stride, v : v + stride * Wo : stride] += (
                    t[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx if batched else gx[0], gw)

    return _node(out if batched else out[0], (a, kernels), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(function, point, step=1e-5):
    """Compare analytic gradients against central finite differences.

    Returns the maximum over coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``function`` must map a Tensor to a scalar Tensor, deterministically.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=WIDE)
    step = float(step)
    x = Tensor(base.copy(), requires_grad=True)
    out = function(x)
    if out.data.size != 1:
        raise ValueError(f"function must return a scalar, got shape {out.data.shape}")
    out.backward()
    analytic = (
        np.zeros(base.size) if x.grad is None else x.grad.reshape(-1).astype(WIDE)
    )
    numeric = np.empty(base.size, dtype=WIDE)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += step
            fp = function(Tensor(xp.reshape(base.shape))).item()
            xm = flat.copy()
            xm[i] -= step
            fm = function(Tensor(xm.reshape(base.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
