"""Primitive neural layers: convolution, layer norm, SimpleGate,
simplified channel attention, pixel shuffle, bilinear resize.

All layers register custom adjoints through autodiff.from_op rather than
composing smaller graph ops; each is covered by a finite-difference check.
"""

import functools
import math

import numpy as np

from . import autodiff
from .backend import kernels
from .errors import ConfigError, ShapeError
from .tlsc import box_mean, box_mean_adjoint


class ConvParams:
    """Stride-1, size-preserving convolution parameters, k in {1, 3}."""

    def __init__(self, weight, bias, groups=1):
        cout, cpg, kh, kw = weight.shape
        if kh != kw or kh not in (1, 3):
            raise ConfigError(f"conv kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if groups < 1 or cout % groups:
            raise ConfigError(f"groups={groups} does not divide c_out={cout}")
        if kh == 1 and groups != 1:
            raise ConfigError("grouped 1x1 convolution is not supported")
        if bias.shape != (1, cout, 1, 1):
            raise ShapeError(f"conv bias must be (1,{cout},1,1), got {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.groups = groups

    @property
    def k(self):
        return self.weight.shape[2]

    @property
    def c_in(self):
        return self.weight.shape[1] * self.groups

    @property
    def c_out(self):
        return self.weight.shape[0]


class LayerNormParams:
    """Per-location channel normalization affine parameters."""

    def __init__(self, weight, bias, eps=1e-6):
        if weight.shape != bias.shape or weight.shape[0] != 1 \
                or weight.shape[2:] != (1, 1):
            raise ShapeError(f"layernorm affine must be (1,c,1,1) pairs, got "
                             f"{weight.shape} and {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.eps = float(eps)


def conv2d(x, p):
    if x.shape[1] != p.c_in:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, "
                         f"params expect {p.c_in}")
    n, cin, h, w = x.shape
    cout = p.c_out
    wd = p.weight.data
    bd = p.bias.data

    if p.k == 1:
        w2 = wd.reshape(cout, cin)
        x3 = x.data.reshape(n, cin, h * w)
        y = np.matmul(w2, x3) + bd.reshape(1, cout, 1)

        def backward_fn(gy):
            gy3 = gy.reshape(n, cout, h * w)
            gx = np.matmul(w2.T, gy3).reshape(n, cin, h, w)
            gyt = gy3.transpose(1, 0, 2).reshape(cout, n * h * w)
            xt = x3.transpose(0, 2, 1).reshape(n * h * w, cin)
            gw = (gyt @ xt).reshape(cout, cin, 1, 1)
            gb = gy3.sum(axis=(0, 2)).reshape(1, cout, 1, 1)
            return gx, gw, gb

        return autodiff.from_op("conv1x1", y.reshape(n, cout, h, w),
                                (x, p.weight, p.bias), backward_fn)

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = kernels().conv3x3_forward(xp, wd, bd.reshape(cout))

    def backward_fn(gy):
        gxp, gw, gb = kernels().conv3x3_backward(xp, wd, np.ascontiguousarray(gy))
        gx = np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1])
        return gx, gw, gb.reshape(1, cout, 1, 1)

    return autodiff.from_op("conv3x3", y, (x, p.weight, p.bias), backward_fn)


def layernorm2d(x, p):
    c = x.shape[1]
    if p.weight.shape[1] != c:
        raise ShapeError(f"layernorm2d: input has {c} channels, "
                         f"params expect {p.weight.shape[1]}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    wd = p.weight.data
    y = xhat * wd + p.bias.data

    def backward_fn(gy):
        gxhat = gy * wd
        s1 = gxhat.sum(axis=1, keepdims=True)
        s2 = (gxhat * xhat).sum(axis=1, keepdims=True)
        gx = (gxhat - (s1 + xhat * s2) / c) * inv
        gw = (gy * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = gy.sum(axis=(0, 2, 3), keepdims=True)
        return gx, gw, gb

    return autodiff.from_op("layernorm2d", y, (x, p.weight, p.bias), backward_fn)


def simple_gate(x):
    """Split channels in half, return first ⊙ second."""
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {c}")
    x1 = x.data[:, :c // 2]
    x2 = x.data[:, c // 2:]

    def backward_fn(gy):
        # late-bound so the gradcheck mutation harness can swap the adjoint
        return (_simple_gate_backward(gy, x1, x2),)

    return autodiff.from_op("simple_gate", x1 * x2, (x,), backward_fn)


def _simple_gate_backward(gy, x1, x2):
    return np.concatenate([gy * x2, gy * x1], axis=1)


def simplified_channel_attention(x, p, pool):
    """x ⊙ (W·pool(x) + b): pooled statistic, linear gate, channel rescale.

    pool is a PoolingPolicy: global mode gates each channel by one scalar
    per image; local mode (the test-time statistics converter) gates per
    location from an edge-clipped window mean.
    """
    c = x.shape[1]
    if p.k != 1 or p.c_in != c or p.c_out != c:
        raise ShapeError(f"channel attention needs a 1x1 {c}->{c} map, got "
                         f"{p.c_in}->{p.c_out} k={p.k}")
    n, _, h, w = x.shape
    xd = x.data
    if pool.mode == "global":
        pooled = xd.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(xd.dtype)
    else:
        pooled = box_mean(xd, pool.window).astype(xd.dtype)
    ph, pw = pooled.shape[2], pooled.shape[3]
    w2 = p.weight.data.reshape(c, c)
    gate = (np.matmul(w2, pooled.reshape(n, c, ph * pw))
            + p.bias.data.reshape(1, c, 1)).reshape(n, c, ph, pw)
    y = xd * gate

    def backward_fn(gy):
        ggate = gy * xd
        if pool.mode == "global":
            ggate = ggate.sum(axis=(2, 3), keepdims=True)
        g3 = ggate.reshape(n, c, ph * pw)
        gpool = np.matmul(w2.T, g3).reshape(n, c, ph, pw)
        gyt = g3.transpose(1, 0, 2).reshape(c, n * ph * pw)
        pt = pooled.reshape(n, c, ph * pw).transpose(0, 2, 1).reshape(n * ph * pw, c)
        gw = (gyt @ pt).reshape(c, c, 1, 1)
        gb = g3.sum(axis=(0, 2)).reshape(1, c, 1, 1)
        if pool.mode == "global":
            gx = gy * gate + gpool / (h * w)
        else:
            gx = gy * gate + box_mean_adjoint(gpool.astype(np.float64),
                                              h, w, pool.window, xd.dtype)
        return gx, gw, gb

    return autodiff.from_op("channel_attention", y, (x, p.weight, p.bias),
                            backward_fn)


def pixel_shuffle(x, s):
    """Rearrange s² channel groups into an s× larger spatial grid."""
    n, c, h, w = x.shape
    if s < 1 or c % (s * s):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {s}^2")
    co = c // (s * s)
    y = x.data.reshape(n, co, s, s, h, w).transpose(0, 1, 4, 2, 5, 3) \
        .reshape(n, co, h * s, w * s)

    def backward_fn(gy):
        return (gy.reshape(n, co, h, s, w, s).transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c, h, w),)

    return autodiff.from_op("pixel_shuffle", y, (x,), backward_fn)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(size, s, dtype_name):
    """Dense (size*s, size) interpolation matrix: source coordinate
    (dst+0.5)/s - 0.5, edge-clamped; at most two taps per output row."""
    m = np.zeros((size * s, size), dtype=np.float64)
    for o in range(size * s):
        src = (o + 0.5) / s - 0.5
        f = math.floor(src)
        t = src - f
        i0 = min(max(f, 0), size - 1)
        i1 = min(max(f + 1, 0), size - 1)
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m.astype(np.dtype(dtype_name))


def bilinear_resize(x, s):
    """Integer-factor bilinear upsample, align-corners-false."""
    s = int(s)
    if s < 1:
        raise ShapeError(f"bilinear_resize needs scale >= 1, got {s}")
    n, c, h, w = x.shape
    my = _bilinear_matrix(h, s, x.dtype.name)
    mx = _bilinear_matrix(w, s, x.dtype.name)
    y = np.matmul(np.matmul(my, x.data), mx.T)

    def backward_fn(gy):
        return (np.matmul(np.matmul(my.T, gy), mx),)

    return autodiff.from_op("bilinear_resize", y, (x,), backward_fn)
