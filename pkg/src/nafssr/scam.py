"""Cross-view fusion: bidirectional row-wise attention between the two
views of a rectified stereo pair.

For each image row, left-view queries attend over right-view keys along
the same row (the epipolar constraint), producing one w×w correlation
matrix per row; the same matrix, transposed, drives the reverse direction,
so it is computed once.  Values come from the un-normalized inputs, and
each view's fetched features enter through a zero-initialized per-channel
scale, making the module the identity at init.
"""

import math

from . import autodiff as ad
from . import layers as nn
from .errors import ShapeError


class ScamParams:
    def __init__(self, ln_l, ln_r, w1_l, w1_r, w2_l, w2_r, gamma_l, gamma_r):
        self.ln_l = ln_l
        self.ln_r = ln_r
        self.w1_l = w1_l    # query projection (left) / key projection (right)
        self.w1_r = w1_r
        self.w2_l = w2_l    # value projections, applied to raw inputs
        self.w2_r = w2_r
        self.gamma_l = gamma_l
        self.gamma_r = gamma_r

    @property
    def width(self):
        return self.ln_l.weight.shape[1]


def scam_forward(x_l, x_r, p, residual_scale=1.0):
    """Returns (f_l, f_r): each view plus its cross-view fetch.

    A[n,h,i,j] correlates left column i with right column j; softmax over j
    weights right-view values for the left output, softmax of Aᵀ over its
    last axis weights left-view values for the right output.
    residual_scale multiplies both fusion terms (stochastic-depth hook).
    """
    if x_l.shape != x_r.shape:
        raise ShapeError(f"scam: view shapes differ, {x_l.shape} vs {x_r.shape}")
    c = p.width
    if x_l.shape[1] != c:
        raise ShapeError(f"scam: input width {x_l.shape[1]} != module width {c}")

    q = nn.conv2d(nn.layernorm2d(x_l, p.ln_l), p.w1_l)
    k = nn.conv2d(nn.layernorm2d(x_r, p.ln_r), p.w1_r)
    v_l = nn.conv2d(x_l, p.w2_l)
    v_r = nn.conv2d(x_r, p.w2_r)

    qp = ad.permute(q, (0, 2, 3, 1))                      # (n,h,w,c)
    kp = ad.permute(k, (0, 2, 1, 3))                      # (n,h,c,w)
    a = ad.scale(ad.batched_row_matmul(qp, kp), 1.0 / math.sqrt(c))

    w_r2l = ad.softmax_lastdim(a)                         # weights over right cols
    w_l2r = ad.softmax_lastdim(ad.permute(a, (0, 1, 3, 2)))  # over left cols

    f_l = ad.batched_row_matmul(w_r2l, ad.permute(v_r, (0, 2, 3, 1)))
    f_r = ad.batched_row_matmul(w_l2r, ad.permute(v_l, (0, 2, 3, 1)))

    f_l = ad.mul(ad.permute(f_l, (0, 3, 1, 2)), p.gamma_l)
    f_r = ad.mul(ad.permute(f_r, (0, 3, 1, 2)), p.gamma_r)
    if residual_scale != 1.0:
        f_l = ad.scale(f_l, residual_scale)
        f_r = ad.scale(f_r, residual_scale)
    return ad.add(x_l, f_l), ad.add(x_r, f_r)


def scam_param_count(c):
    """Exact trainable-scalar count of one module of width c: 4c² + 10c."""
    ln = 2 * (2 * c)
    projections = 4 * (c * c + c)   # w1_l, w1_r, w2_l, w2_r
    scales = 2 * c                  # gamma_l, gamma_r
    return ln + projections + scales
