"""Numba-compiled kernels (default backend when numba is importable).

Contracts match _kernels_numpy exactly; outputs agree with the numpy lane
to accumulation-order rounding.  Kernels are single-threaded: the target
deployment is CPU-count-limited and prange would only add compile latency.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def conv3x3_forward(xp, w, b):
    n, cin, hp, wp = xp.shape
    cout, cpg = w.shape[0], w.shape[1]
    groups = cin // cpg
    cog = cout // groups
    h, wd = hp - 2, wp - 2
    y = np.empty((n, cout, h, wd), dtype=xp.dtype)
    for ni in range(n):
        for co in range(cout):
            c0 = (co // cog) * cpg
            bias = b[co]
            for i in range(h):
                row = y[ni, co, i]
                for j in range(wd):
                    row[j] = bias
                for ci in range(cpg):
                    for di in range(3):
                        xr = xp[ni, c0 + ci, i + di]
                        w0 = w[co, ci, di, 0]
                        w1 = w[co, ci, di, 1]
                        w2 = w[co, ci, di, 2]
                        for j in range(wd):
                            row[j] += w0 * xr[j] + w1 * xr[j + 1] + w2 * xr[j + 2]
    return y


@njit(cache=True)
def conv3x3_backward(xp, w, gy):
    n, cin, hp, wp = xp.shape
    cout, cpg = w.shape[0], w.shape[1]
    groups = cin // cpg
    cog = cout // groups
    h, wd = hp - 2, wp - 2
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gb = np.zeros(cout, dtype=w.dtype)
    for ni in range(n):
        for co in range(cout):
            c0 = (co // cog) * cpg
            for i in range(h):
                gr = gy[ni, co, i]
                s = gb[co]
                for j in range(wd):
                    s += gr[j]
                gb[co] = s
                for ci in range(cpg):
                    for di in range(3):
                        xr = xp[ni, c0 + ci, i + di]
                        gxr = gxp[ni, c0 + ci, i + di]
                        a0 = w[co, ci, di, 0]
                        a1 = w[co, ci, di, 1]
                        a2 = w[co, ci, di, 2]
                        s0 = gr[0] * 0
                        s1 = s0
                        s2 = s0
                        for j in range(wd):
                            gj = gr[j]
                            gxr[j] += a0 * gj
                            gxr[j + 1] += a1 * gj
                            gxr[j + 2] += a2 * gj
                            s0 += xr[j] * gj
                            s1 += xr[j + 1] * gj
                            s2 += xr[j + 2] * gj
                        gw[co, ci, di, 0] += s0
                        gw[co, ci, di, 1] += s1
                        gw[co, ci, di, 2] += s2
    return gxp, gw, gb


@njit(cache=True)
def box_pool_sums(x, up, down, left, right):
    n, c, h, w = x.shape
    out = np.empty((n, c, h, w), dtype=np.float64)
    colsum = np.empty(w, dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            xc = x[ni, ci]
            # colsum[j] = sum of xc[r, j] for r in [i-up, i+down] clipped; slide over i
            for j in range(w):
                colsum[j] = 0.0
            for r in range(min(down, h - 1) + 1):
                for j in range(w):
                    colsum[j] += xc[r, j]
            for i in range(h):
                if i > 0:
                    rin = i + down
                    rout = i - 1 - up
                    if rin < h:
                        for j in range(w):
                            colsum[j] += xc[rin, j]
                    if rout >= 0:
                        for j in range(w):
                            colsum[j] -= xc[rout, j]
                acc = 0.0
                for j in range(min(right, w - 1) + 1):
                    acc += colsum[j]
                orow = out[ni, ci, i]
                orow[0] = acc
                for j in range(1, w):
                    jin = j + right
                    jout = j - 1 - left
                    if jin < w:
                        acc += colsum[jin]
                    if jout >= 0:
                        acc -= colsum[jout]
                    orow[j] = acc
    return out
