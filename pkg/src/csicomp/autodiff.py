"""Dense tensors with reverse-mode automatic differentiation.

Small tape-less engine: every op returns a new ``Tensor`` node holding the
forward value, references to its parents, and a closure that maps the
output gradient to parent gradients.  ``backward`` runs one reverse
topological traversal and accumulates gradients additively across fan-out.

Precision policy: values are stored in float32 by default; statistical
reductions (sums, softmax denominators, normalization moments) accumulate
in float64, while BLAS contractions run in storage precision.  Gradient
checks run on float64 tensors end to end.
Tensors are value-semantic: no op mutates its inputs (the optimizer may
rebind leaf ``.data`` between steps).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

ACC_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


_grad_enabled = True
_check_finite = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_check_finite(flag: bool) -> None:
    """Verify every op output is finite (NaN propagation becomes an error)."""
    global _check_finite
    _check_finite = bool(flag)


# Optional multiply-accumulate tracing, used by complexity tests.
_trace: list | None = None


@contextmanager
def op_trace():
    """Record (op_name, operand shapes, MAC count) for contraction ops."""
    global _trace
    prev = _trace
    _trace = []
    try:
        yield _trace
    finally:
        _trace = prev


def _record_macs(op: str, shapes, macs: int) -> None:
    if _trace is not None:
        _trace.append((op, tuple(shapes), int(macs)))


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._grad_fn = None
        self._op = "leaf"

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, dtype={self.data.dtype})"

    # Light operator sugar; heavy lifting stays in module functions.
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data: np.ndarray, parents, grad_fn, op: str) -> Tensor:
    """Wrap an op result; records the backward rule only while grads are on."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def make_op(inputs, out_data, grad_fn, name: str) -> Tensor:
    """Register a custom differentiable op (used by quantizer/entropy layers).

    ``grad_fn(g)`` must return one gradient array (or None) per input.
    """
    return _node(np.asarray(out_data), tuple(inputs), grad_fn, name)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype {a.data.dtype} vs {b.data.dtype}")


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product in storage precision (BLAS accumulates in registers).

    Upcasting f32 operands to f64 here would triple memory traffic for no
    useful accuracy; float64 paths come from float64 tensors instead.
    """
    return np.matmul(a, b)


def _acc_sum(a: np.ndarray, axis=None, keepdims=False, out_dtype=None) -> np.ndarray:
    out = np.sum(a, axis=axis, keepdims=keepdims, dtype=ACC_DTYPE)
    return out.astype(out_dtype or a.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a: Tensor, c) -> Tensor:
    c = a.data.dtype.type(c)
    return _node(a.data + c, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c) -> Tensor:
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def add_bias(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Broadcast-add a 1-D bias along one axis (the only broadcast allowed)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} vs axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = b.shape[0]
    other = tuple(i for i in range(x.ndim) if i != axis)

    def grad_fn(g):
        return g, _acc_sum(g, axis=other, out_dtype=b.data.dtype)

    return _node(x.data + b.data.reshape(shape), (x, b), grad_fn, "add_bias")


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype {a.dtype} vs {b.dtype}")
    r, k = a.shape
    c = b.shape[1]
    _record_macs("matmul", (a.shape, b.shape), r * k * c)

    def grad_fn(g):
        return (_mm(g, b.data.T), _mm(a.data.T, g))

    return _node(_mm(a.data, b.data), (a, b), grad_fn, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading axes: [..., r, k] @ [..., k, c]."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"bmm: {a.data.shape} x {b.data.shape}")
    if a.shape[-1] != b.shape[-2] or a.dtype != b.dtype:
        raise ShapeError(f"bmm: {a.data.shape} x {b.data.shape}")
    batch = int(np.prod(a.shape[:-2]))
    r, k = a.shape[-2:]
    c = b.shape[-1]
    _record_macs("bmm", (a.shape, b.shape), batch * r * k * c)

    def grad_fn(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2))
        gb = _mm(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _node(_mm(a.data, b.data), (a, b), grad_fn, "bmm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Token-wise affine map: x[..., k] @ w[k, c] (+ bias[c])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} x {w.data.shape}")
    if x.dtype != w.dtype or (b is not None and b.dtype != x.dtype):
        raise ShapeError("linear: mixed dtypes")
    k, c = w.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out = _mm(x2, w.data)
    _record_macs("linear", (x.shape, w.shape), x2.shape[0] * k * c)
    if b is not None:
        if b.shape != (c,):
            raise ShapeError(f"linear: bias {b.data.shape} vs out dim {c}")
        out = out + b.data
    out = out.reshape(lead + (c,))

    def grad_fn(g):
        g2 = g.reshape(-1, c)
        gx = _mm(g2, w.data.T).reshape(x.shape)
        gw = _mm(x2.T, g2)
        if b is None:
            return gx, gw
        return gx, gw, _acc_sum(g2, axis=0, out_dtype=b.dtype)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, grad_fn, "linear")


# ---------------------------------------------------------------------------
# convolutions (cross-correlation convention; kernels are learned, no flip)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _norm_padding(padding) -> tuple[int, int]:
    if isinstance(padding, tuple):
        ph, pw = padding
    else:
        ph = pw = int(padding)
    if ph < 0 or pw < 0:
        raise ShapeError(f"conv: negative padding {padding}")
    return ph, pw


def _conv_out_extent(n: int, k: int, pad: int, stride: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"conv: kernel {k} exceeds padded extent {n + 2 * pad}")
    if span % stride != 0:
        raise ShapeError(
            f"conv: extent {n} with kernel {k}, padding {pad}, stride {stride} "
            "gives a non-integral output extent"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [b, c, H, W] -> [b, ho, wo, c, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int, ph: int, pw: int,
              return_cols: bool = False):
    b, ci, h, w = x.shape
    co, ci_k, kh, kw = k.shape
    ho = _conv_out_extent(h, kh, ph, stride)
    wo = _conv_out_extent(w, kw, pw, stride)
    cols = _im2col(_pad_hw(x, ph, pw), kh, kw, stride).reshape(b * ho * wo, ci * kh * kw)
    out2 = _mm(cols, k.reshape(co, -1).T)
    out = np.ascontiguousarray(out2.reshape(b, ho, wo, co).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, ph: int, pw: int,
                     h: int, w: int) -> np.ndarray:
    # adjoint of _conv_fwd with respect to x; also the forward of conv_transpose
    b, co, ho, wo = g.shape
    _, ci, kh, kw = k.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
    cols = _mm(g2, k.reshape(co, -1))
    cols = cols.reshape(b, ho, wo, ci, kh, kw)
    canvas = np.zeros((b, ci, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for di in range(kh):
        for dj in range(kw):
            canvas[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += \
                cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return canvas[:, :, ph:ph + h, pw:pw + w]


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, ph: int, pw: int,
                      kshape: tuple, cols: np.ndarray | None = None) -> np.ndarray:
    co, ci, kh, kw = kshape
    b, _, ho, wo = g.shape
    if cols is None:
        cols = _im2col(_pad_hw(x, ph, pw), kh, kw, stride) \
            .reshape(b * ho * wo, ci * kh * kw)
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, co)
    return _mm(g2.T, cols).reshape(kshape)


def _conv_common(x: Tensor, kernel: Tensor, stride, padding, op: str):
    if kernel.ndim != 4:
        raise ShapeError(f"{op}: kernel must be 4-D, got {kernel.data.shape}")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"{op}: dtype {x.dtype} vs {kernel.dtype}")
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ShapeError(f"{op}: input must be [c,h,w] or [b,c,h,w], got {x.data.shape}")
    ph, pw = _norm_padding(padding)
    return stride, ph, pw, batched


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation: [b?,c_in,h,w] x [c_out,c_in,kh,kw]."""
    stride, ph, pw, batched = _conv_common(x, kernel, stride, padding, "conv2d")
    xd = x.data if batched else x.data[None]
    co, ci, kh, kw = kernel.shape
    if xd.shape[1] != ci:
        raise ShapeError(f"conv2d: input channels {xd.shape[1]} != kernel c_in {ci}")
    b, _, h, w = xd.shape
    ho = _conv_out_extent(h, kh, ph, stride)
    wo = _conv_out_extent(w, kw, pw, stride)
    _record_macs("conv2d", (x.shape, kernel.shape), b * ho * wo * co * ci * kh * kw)
    keep_cols = _grad_enabled and (x.requires_grad or kernel.requires_grad)
    out, cols = _conv_fwd(xd, kernel.data, stride, ph, pw, return_cols=True)
    if not keep_cols:
        cols = None

    def grad_fn(g):
        gd = g if batched else g[None]
        gx = _conv_input_grad(gd, kernel.data, stride, ph, pw, h, w)
        gk = _conv_kernel_grad(xd, gd, stride, ph, pw, kernel.shape, cols=cols)
        return (gx if batched else gx[0]), gk

    return _node(out if batched else out[0], (x, kernel), grad_fn, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding=0) -> Tensor:
    """Adjoint of conv2d with the same kernel/stride/padding.

    Maps [b?, c_out, h', w'] back to [b?, c_in, h, w] with
    h = (h' - 1) * stride - 2 * padding + kh.
    """
    stride, ph, pw, batched = _conv_common(x, kernel, stride, padding, "conv_transpose2d")
    xd = x.data if batched else x.data[None]
    co, ci, kh, kw = kernel.shape
    if xd.shape[1] != co:
        raise ShapeError(
            f"conv_transpose2d: input channels {xd.shape[1]} != kernel c_out {co}")
    b, _, hi, wi = xd.shape
    h = (hi - 1) * stride - 2 * ph + kh
    w = (wi - 1) * stride - 2 * pw + kw
    if h < 1 or w < 1:
        raise ShapeError(f"conv_transpose2d: output extent ({h},{w}) is empty")
    out = _conv_input_grad(xd, kernel.data, stride, ph, pw, h, w)

    def grad_fn(g):
        gd = g if batched else g[None]
        gx = _conv_fwd(gd, kernel.data, stride, ph, pw)
        gk = _conv_kernel_grad(gd, xd, stride, ph, pw, kernel.shape)
        return (gx if batched else gx[0]), gk

    return _node(out if batched else out[0], (x, kernel), grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF (no tanh approximation)."""
    xd = x.data
    cdf = xd * xd.dtype.type(_INV_SQRT2)
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5

    def grad_fn(g):
        t = xd * xd
        t *= -0.5
        np.exp(t, out=t)
        t *= xd.dtype.type(_INV_SQRT2PI)
        t *= xd
        t += cdf
        t *= g
        return (t,)

    return _node(xd * cdf, (x,), grad_fn, "gelu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_ACTIVATIONS = {"gelu": gelu, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind '{kind}'") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; denominator accumulated in float64."""
    axis = axis % x.ndim
    xd = x.data
    y = xd - np.max(xd, axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= _acc_sum(y, axis=axis, keepdims=True)

    def grad_fn(g):
        gx = g - _acc_sum(g * y, axis=axis, keepdims=True)
        gx *= y
        return (gx,)

    return _node(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must be ({n},)")
    if x.dtype != gain.dtype or x.dtype != bias.dtype:
        raise ShapeError("layer_norm: mixed dtypes")
    bshape = [1] * x.ndim
    bshape[axis] = n
    dt = x.dtype
    # statistics accumulate in float64, elementwise math stays in storage dtype
    mean = np.mean(x.data, axis=axis, keepdims=True, dtype=ACC_DTYPE).astype(dt)
    xc = x.data - mean
    var = np.mean(xc * xc, axis=axis, keepdims=True, dtype=ACC_DTYPE)
    inv = (1.0 / np.sqrt(var + LAYER_NORM_EPS)).astype(dt)
    xhat = xc * inv
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def grad_fn(g):
        dxhat = g * gain.data.reshape(bshape)
        m1 = np.mean(dxhat, axis=axis, keepdims=True, dtype=ACC_DTYPE).astype(dt)
        m2 = np.mean(dxhat * xhat, axis=axis, keepdims=True, dtype=ACC_DTYPE).astype(dt)
        gx = inv * (dxhat - m1 - xhat * m2)
        ggain = _acc_sum(g * xhat, axis=other, out_dtype=gain.dtype)
        gbias = _acc_sum(g, axis=other, out_dtype=bias.dtype)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), grad_fn, "layer_norm")


# ---------------------------------------------------------------------------
# shape surgery


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),),
                 "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(int(a) for a in np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 grad_fn, "concat")


def sum_all(x: Tensor) -> Tensor:
    """Full reduction to a scalar (0-d) tensor, float64 accumulation."""
    out = np.asarray(_acc_sum(x.data, out_dtype=x.dtype))
    return _node(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape),), "sum")


def _window_split(d_last: np.ndarray, w: int) -> np.ndarray:
    # [..., d, L, L] laid out as [b?, d, L, L]; returns [..., m*m, w*w, d]
    lead = d_last.shape[:-3]
    d, l, _ = d_last.shape[-3:]
    m = l // w
    y = d_last.reshape(lead + (d, m, w, m, w))
    nlead = len(lead)
    perm = tuple(range(nlead)) + tuple(nlead + i for i in (1, 3, 2, 4, 0))
    return np.ascontiguousarray(y.transpose(perm)).reshape(lead + (m * m, w * w, d))


def _window_join(wins: np.ndarray, w: int) -> np.ndarray:
    lead = wins.shape[:-3]
    nwin, wsq, d = wins.shape[-3:]
    m = math.isqrt(nwin)
    l = m * w
    y = wins.reshape(lead + (m, m, w, w, d))
    nlead = len(lead)
    perm = tuple(range(nlead)) + tuple(nlead + i for i in (4, 0, 2, 1, 3))
    return np.ascontiguousarray(y.transpose(perm)).reshape(lead + (d, l, l))


def window_partition(x: Tensor, window: int) -> Tensor:
    """[b?, d, L, L] -> [b?, m*m, W*W, d] over non-overlapping W x W windows."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"window_partition: need [d,L,L] or [b,d,L,L], got {x.data.shape}")
    d, l, l2 = x.shape[-3:]
    if l != l2:
        raise ShapeError(f"window_partition: spatial map must be square, got {x.data.shape}")
    if window < 1 or l % window != 0:
        raise ShapeError(f"window_partition: window {window} does not divide side {l}")
    return _node(_window_split(x.data, window), (x,),
                 lambda g: (_window_join(g, window),), "window_partition")


def window_merge(x: Tensor, window: int) -> Tensor:
    """Inverse of window_partition: [b?, m*m, W*W, d] -> [b?, d, L, L]."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"window_merge: need [m2,W2,d] or [b,m2,W2,d], got {x.data.shape}")
    nwin, wsq, d = x.shape[-3:]
    m = math.isqrt(nwin)
    if m * m != nwin or wsq != window * window:
        raise ShapeError(f"window_merge: {x.data.shape} is not a W={window} partition")
    return _node(_window_join(x.data, window), (x,),
                 lambda g: (_window_split(g, window),), "window_merge")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable requires_grad tensor.

    Reverse topological traversal; each recorded op's rule runs exactly once,
    gradients accumulate additively across fan-out.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.data.dtype).reshape(parent.data.shape)
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    nan_failures: int
    checked: int
    worst_index: int = -1
    details: list = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.nan_failures == 0 and self.max_rel_err < tol


def _rel_err(a: float, n: float) -> float:
    if math.isnan(a) or math.isnan(n):
        return float("inf")
    denom = max(abs(a), abs(n))
    if denom < 1e-10:
        return 0.0
    return abs(a - n) / denom


def grad_check(f, x: Tensor, step: float = 1e-3, indices=None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(x)`` with central differences.

    ``f`` must be twice differentiable at ``x`` (callers keep probes away
    from quantizer kinks).  Use float64 tensors for meaningful tolerances.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad
    flat = probe.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    max_err = 0.0
    worst = -1
    nan_failures = 0
    details = []
    checked = 0
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + step
        hi = float(f(Tensor(probe.data.copy())).data)
        flat[idx] = orig - step
        lo = float(f(Tensor(probe.data.copy())).data)
        flat[idx] = orig
        numeric = (hi - lo) / (2.0 * step)
        ana = float(analytic.reshape(-1)[idx])
        err = _rel_err(ana, numeric)
        if math.isinf(err):
            nan_failures += 1
        if err > max_err:
            max_err = err
            worst = idx
        details.append((int(idx), ana, numeric, err))
        checked += 1
    return GradCheckReport(max_rel_err=max_err, nan_failures=nan_failures,
                           checked=checked, worst_index=worst, details=details)
