"""Differentiable operations used by the stereo network.

Convolutions are cross-correlations (no kernel flip) over any number of
spatial dimensions and are lowered to a single matrix product per batch
entry via im2col. The transposed convolution is implemented as the exact
adjoint of the forward convolution, so both share the same kernels.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Function, Tensor, as_tensor, unbroadcast

IntOrTuple = Union[int, Sequence[int]]


def _ntuple(v: IntOrTuple, n: int) -> Tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise and shape ops


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = unbroadcast(g * self.b, self.a.shape) if self.needs_input_grad(0) else None
        gb = unbroadcast(g * self.a, self.b.shape) if self.needs_input_grad(1) else None
        return ga, gb


class Scale(Function):
    def forward(self, a, c):
        self.c = c
        return a * np.asarray(c, dtype=a.dtype)

    def backward(self, g):
        return (g * np.asarray(self.c, dtype=g.dtype),)


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    return Add.apply(a, _const(b, a))


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    return Sub.apply(a, _const(b, a))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return Scale.apply(a, c=float(b))
    a = a if isinstance(a, Tensor) else _const(a, b)
    return Mul.apply(a, _const(b, a))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    return Scale.apply(a, c=float(c))


multiply_scalar = scale


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.maximum(x, np.zeros((), dtype=x.dtype))  # propagates NaN

    def backward(self, g):
        return (g * self.mask,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


class SmoothL1(Function):
    def forward(self, x):
        self.x = x
        ax = np.abs(x)
        return np.where(ax < 1, 0.5 * x * x, ax - 0.5).astype(x.dtype, copy=False)

    def backward(self, g):
        return (g * np.clip(self.x, -1, 1),)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, else |x| - 0.5."""
    return SmoothL1.apply(x)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = sorted(a % len(self.shape) for a in axes)
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, self.shape).copy(),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class GetItem(Function):
    def forward(self, x, index):
        self.in_shape = x.shape
        self.dtype = x.dtype
        self.index = index
        return x[index]

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=g.dtype)
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return (out,)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    return GetItem.apply(x, index=index)


class Pad(Function):
    def forward(self, x, widths):
        self.widths = widths
        return np.pad(x, widths)

    def backward(self, g):
        index = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(self.widths))
        return (g[index],)


def pad(x: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` holds one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise ValueError(f"pad widths for {len(widths)} axes given to a rank-{x.ndim} tensor")
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    return Pad.apply(x, widths=widths)


class Concat(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, splits, axis=self.axis))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ndim = xs[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"concat axis {axis} out of range for rank {ndim}")
    axis %= ndim
    for i, x in enumerate(xs[1:], 1):
        for ax in range(ndim):
            if ax != axis and x.shape[ax] != xs[0].shape[ax]:
                raise ValueError(
                    f"concat: input {i} has extent {x.shape[ax]} on axis {ax}, expected {xs[0].shape[ax]}")
    return Concat.apply(*xs, axis=axis)


class Stack(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        return np.stack(xs, axis=axis)

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis %= xs[0].ndim + 1
    return Stack.apply(*xs, axis=axis)


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    return Softmax.apply(x, axis=axis % x.ndim)


# ---------------------------------------------------------------------------
# resampling


def linear_resize_matrix(n_in: int, scale_factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (n_in*scale, n_in) with half-pixel centres.

    Matches align_corners=False: output sample ``o`` reads source coordinate
    ``(o + 0.5) / scale - 0.5`` clamped at zero.
    """
    n_out = n_in * scale_factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = max((o + 0.5) / scale_factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    return m


class ResampleAxis(Function):
    def forward(self, x, matrix, axis):
        self.matrix = matrix.astype(x.dtype, copy=False)
        self.axis = axis
        y = np.tensordot(x, self.matrix, axes=([axis], [1]))
        return np.ascontiguousarray(np.moveaxis(y, -1, axis))

    def backward(self, g):
        y = np.tensordot(g, self.matrix, axes=([self.axis], [0]))
        return (np.ascontiguousarray(np.moveaxis(y, -1, self.axis)),)


def upsample_linear(x: Tensor, scale_factor: int, axes: Sequence[int]) -> Tensor:
    if int(scale_factor) != scale_factor or scale_factor < 1:
        raise ValueError(f"upsample scale must be a positive integer, got {scale_factor}")
    for axis in axes:
        m = linear_resize_matrix(x.shape[axis], int(scale_factor))
        x = ResampleAxis.apply(x, matrix=m, axis=axis % x.ndim)
    return x


def upsample_trilinear(x: Tensor, scale_factor: int = 4) -> Tensor:
    """Trilinear upsampling of the last three axes of an [N, C, D, H, W] tensor."""
    if x.ndim != 5:
        raise ValueError(f"upsample_trilinear expects [N, C, D, H, W], got shape {x.shape}")
    return upsample_linear(x, scale_factor, axes=(2, 3, 4))


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window_slices(offsets, dilation, stride, out_sp):
    return tuple(
        slice(o * d, o * d + s * (n - 1) + 1, s)
        for o, d, s, n in zip(offsets, dilation, stride, out_sp))


def _im2col(xp, ksize, stride, dilation, out_sp):
    """[N, C, *S] padded input -> [N, C*K, P] patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, int(np.prod(ksize))) + tuple(out_sp), dtype=xp.dtype)
    for k, offsets in enumerate(itertools.product(*(range(s) for s in ksize))):
        cols[:, :, k] = xp[(slice(None), slice(None)) + _window_slices(offsets, dilation, stride, out_sp)]
    return cols.reshape(n, -1, int(np.prod(out_sp)))


def _col2im(cols, padded_shape, ksize, stride, dilation, out_sp):
    """Adjoint of :func:`_im2col`: scatter-add patches into a padded input."""
    n, c = padded_shape[:2]
    cols = cols.reshape((n, c, int(np.prod(ksize))) + tuple(out_sp))
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for k, offsets in enumerate(itertools.product(*(range(s) for s in ksize))):
        xp[(slice(None), slice(None)) + _window_slices(offsets, dilation, stride, out_sp)] += cols[:, :, k]
    return xp


def _unpad(xp, padding):
    index = (slice(None), slice(None)) + tuple(
        slice(p, xp.shape[i + 2] - p) for i, p in enumerate(padding))
    return xp[index]


def _conv_forward(x, w, stride, padding, dilation):
    """Returns (output, cached patch matrix)."""
    nsp = x.ndim - 2
    ksize = w.shape[2:]
    out_sp = tuple(conv_output_size(x.shape[i + 2], ksize[i], stride[i], padding[i], dilation[i])
                   for i in range(nsp))
    if min(out_sp) < 1:
        raise ValueError(f"convolution output would be empty: input {x.shape}, kernel {ksize}")
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding)) if any(padding) else x
    cols = _im2col(xp, ksize, stride, dilation, out_sp)
    w2 = w.reshape(w.shape[0], -1)
    out = np.matmul(w2, cols)
    return out.reshape((x.shape[0], w.shape[0]) + out_sp), cols


def _conv_input_grad(g, w, in_shape, stride, padding, dilation):
    """Gradient of the convolution w.r.t. its input (the transposed convolution)."""
    n = g.shape[0]
    out_sp = g.shape[2:]
    ksize = w.shape[2:]
    w2 = w.reshape(w.shape[0], -1)
    gcols = np.matmul(w2.T, g.reshape(n, g.shape[1], -1))
    padded = tuple(in_shape[:2]) + tuple(in_shape[i + 2] + 2 * p for i, p in enumerate(padding))
    # input cells beyond the last window (floor in the size formula) receive no gradient
    gxp = _col2im(gcols, padded, ksize, stride, dilation, out_sp)
    return _unpad(gxp, padding)


def _conv_weight_grad(cols, g, w_shape):
    n, cout = g.shape[:2]
    g2 = g.reshape(n, cout, -1)
    gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
    return gw.reshape(w_shape)


class ConvNd(Function):
    def forward(self, x, w, b, stride, padding, dilation):
        self.w = w
        self.x_shape = x.shape
        self.conf = (stride, padding, dilation)
        out, self.cols = _conv_forward(x, w, stride, padding, dilation)
        if b is not None and b.size:
            out += b.reshape((1, -1) + (1,) * (out.ndim - 2))
        return out

    def backward(self, g):
        stride, padding, dilation = self.conf
        gx = _conv_input_grad(g, self.w, self.x_shape, stride, padding, dilation) \
            if self.needs_input_grad(0) else None
        gw = _conv_weight_grad(self.cols, g, self.w.shape) if self.needs_input_grad(1) else None
        gb = None
        if len(self.parents) > 2 and self.needs_input_grad(2):
            gb = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return gx, gw, gb


class ConvTransposeNd(Function):
    def forward(self, x, w, b, stride, padding, dilation, out_shape):
        # w: [Cin, Cout, *k] is the kernel of the convolution mapping Cout -> Cin
        self.x = x
        self.w = w
        self.conf = (stride, padding, dilation)
        out = _conv_input_grad(x, w, out_shape, stride, padding, dilation)
        if b is not None and b.size:
            out += b.reshape((1, -1) + (1,) * (out.ndim - 2))
        self.out_shape = out.shape
        return out

    def backward(self, g):
        stride, padding, dilation = self.conf
        gx = gw = gb = None
        if self.needs_input_grad(0) or self.needs_input_grad(1):
            gx, cols = _conv_forward(g, self.w, stride, padding, dilation)
            if self.needs_input_grad(1):
                # weight gradient of conv(g) whose output gradient is x
                gw = _conv_weight_grad(cols, self.x, self.w.shape)
            if not self.needs_input_grad(0):
                gx = None
        if len(self.parents) > 2 and self.needs_input_grad(2):
            gb = g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return gx, gw, gb


def _check_conv_args(x: Tensor, w: Tensor, nsp: int, name: str, transposed: bool = False):
    if x.ndim != nsp + 2:
        raise ValueError(f"{name}: input must have rank {nsp + 2} (axis layout N, C, spatial...), got shape {x.shape}")
    if w.ndim != nsp + 2:
        raise ValueError(f"{name}: weight must have rank {nsp + 2}, got shape {w.shape}")
    cin = w.shape[0] if transposed else w.shape[1]
    if x.shape[1] != cin:
        raise ValueError(f"{name}: channel axis (axis 1) of input is {x.shape[1]} but weight expects {cin}")


def convnd(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: IntOrTuple = 1, padding: IntOrTuple = 0, dilation: IntOrTuple = 1) -> Tensor:
    nsp = x.ndim - 2
    _check_conv_args(x, weight, nsp, f"conv{nsp}d")
    conf = dict(stride=_ntuple(stride, nsp), padding=_ntuple(padding, nsp), dilation=_ntuple(dilation, nsp))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"conv{nsp}d: bias shape {bias.shape} does not match {weight.shape[0]} output channels")
        return ConvNd.apply(x, weight, bias, **conf)
    return ConvNd.apply(x, weight, b=None, **conf)


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    _check_conv_args(x, weight, 2, "conv2d")
    return convnd(x, weight, bias, stride, padding, dilation)


def conv3d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    _check_conv_args(x, weight, 3, "conv3d")
    return convnd(x, weight, bias, stride, padding, dilation)


def conv_transpose_output_size(n, k, stride, padding, output_padding, dilation=1) -> int:
    return (n - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: IntOrTuple = 2, padding: IntOrTuple = 1,
                     output_padding: IntOrTuple = 1, dilation: IntOrTuple = 1) -> Tensor:
    """Transposed 3D convolution; weight layout [Cin, Cout, kD, kH, kW]."""
    _check_conv_args(x, weight, 3, "conv_transpose3d", transposed=True)
    stride, padding = _ntuple(stride, 3), _ntuple(padding, 3)
    output_padding, dilation = _ntuple(output_padding, 3), _ntuple(dilation, 3)
    for op, s, d in zip(output_padding, stride, dilation):
        if op >= max(s, d):
            raise ValueError("conv_transpose3d: output_padding must be smaller than stride or dilation")
    out_sp = tuple(conv_transpose_output_size(x.shape[i + 2], weight.shape[i + 2], stride[i],
                                              padding[i], output_padding[i], dilation[i])
                   for i in range(3))
    out_shape = (x.shape[0], weight.shape[1]) + out_sp
    if bias is not None:
        return ConvTransposeNd.apply(x, weight, bias, stride=stride, padding=padding,
                                     dilation=dilation, out_shape=out_shape)
    return ConvTransposeNd.apply(x, weight, b=None, stride=stride, padding=padding,
                                 dilation=dilation, out_shape=out_shape)


# ---------------------------------------------------------------------------
# normalization

BN_EPS = 1e-5


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps):
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        self.axes, self.bshape = axes, bshape
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        self.invstd = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.invstd
        self.gamma = gamma
        self.batch_mean = mu.reshape(-1)
        self.batch_var = var.reshape(-1)
        return self.xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, g):
        axes, bshape = self.axes, self.bshape
        m = g.size // g.shape[1]
        gbeta = g.sum(axis=axes)
        ggamma = (g * self.xhat).sum(axis=axes)
        gx = None
        if self.needs_input_grad(0):
            gxhat = g * self.gamma.reshape(bshape)
            gx = (self.invstd / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - self.xhat * (gxhat * self.xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, mean, var, eps):
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        self.axes = (0,) + tuple(range(2, x.ndim))
        self.bshape = bshape
        self.invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
        self.xhat = (x - mean.astype(x.dtype).reshape(bshape)) * self.invstd
        self.gamma = gamma
        return self.xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, g):
        gx = g * self.gamma.reshape(self.bshape) * self.invstd
        return gx, (g * self.xhat).sum(axis=self.axes), g.sum(axis=self.axes)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over every axis except axis 1.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place (unbiased variance, like common frameworks).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: input has {c} channels but gamma/beta have shape {gamma.shape}/{beta.shape}")
    if not training:
        return BatchNormEval.apply(x, gamma, beta, mean=running_mean, var=running_var, eps=eps)
    out = BatchNormTrain.apply(x, gamma, beta, eps=eps)
    fn = out._ctx
    if fn is None:
        # graph not recorded; recompute the statistics for the buffer update
        axes = (0,) + tuple(range(2, x.ndim))
        bmean, bvar = x.data.mean(axis=axes), x.data.var(axis=axes)
    else:
        bmean, bvar = fn.batch_mean, fn.batch_var
    m = x.size // c
    unbiased = bvar * (m / max(m - 1, 1))
    running_mean *= 1 - momentum
    running_mean += momentum * bmean
    running_var *= 1 - momentum
    running_var += momentum * unbiased
    return out


# ---------------------------------------------------------------------------
# group-wise correlation


class GroupCorrelation(Function):
    """Group-wise correlation volume; one channel per feature group.

    out[n, g, d, y, x] = mean over the channels c of group g of
    left[n, c, y, x] * right[n, c, y, x - d], zero where x - d < 0.
    """

    def forward(self, left, right, d_levels, groups):
        n, c, h, w = left.shape
        cpg = c // groups
        self.left, self.right = left, right
        self.d_levels, self.groups = d_levels, groups
        out = np.zeros((n, groups, d_levels, h, w), dtype=left.dtype)
        for d in range(min(d_levels, w)):
            prod = left[..., d:] * right[..., :w - d]
            out[:, :, d, :, d:] = prod.reshape(n, groups, cpg, h, w - d).mean(axis=2)
        return out

    def backward(self, g):
        left, right = self.left, self.right
        n, c, h, w = left.shape
        cpg = c // self.groups
        gl = np.zeros_like(left)
        gr = np.zeros_like(right)
        for d in range(min(self.d_levels, w)):
            gd = g[:, :, d, :, d:] / cpg
            gd = np.repeat(gd, cpg, axis=1)
            gl[..., d:] += gd * right[..., :w - d]
            gr[..., :w - d] += gd * left[..., d:]
        return gl, gr


def group_correlation(left: Tensor, right: Tensor, d_levels: int, groups: int) -> Tensor:
    return GroupCorrelation.apply(left, right, d_levels=int(d_levels), groups=int(groups))
