"""Pure-numpy reference kernels (fallback backend).

Same contracts as _kernels_numba: conv3x3_* take zero-padded input of shape
(n, cin, h+2, w+2) and return unpadded outputs / padded input gradients;
box_pool_sums returns float64 windowed sums with edge-clipped windows.
"""

import numpy as np

NAME = "numpy"


def conv3x3_forward(xp, w, b):
    n, cin, hp, wp = xp.shape
    cout, cpg = w.shape[0], w.shape[1]
    groups = cin // cpg
    h, wd = hp - 2, wp - 2
    if groups == cin and cpg == 1 and cout == cin:
        # depthwise: 9 broadcast fused multiply-adds
        y = np.empty((n, cout, h, wd), dtype=xp.dtype)
        y[:] = b[None, :, None, None]
        for di in range(3):
            for dj in range(3):
                y += w[None, :, 0, di, dj, None, None] * xp[:, :, di:di + h, dj:dj + wd]
        return y
    if groups == 1:
        # dense: one batched matmul per tap, (cout,cin) @ (n,cin,h*w)
        acc = np.zeros((n, cout, h * wd), dtype=xp.dtype)
        for di in range(3):
            for dj in range(3):
                xs = xp[:, :, di:di + h, dj:dj + wd].reshape(n, cin, h * wd)
                acc += np.matmul(w[:, :, di, dj], xs)
        acc += b[None, :, None]
        return acc.reshape(n, cout, h, wd)
    # generic grouped path (rare)
    cog = cout // groups
    xg = xp.reshape(n, groups, cpg, hp, wp)
    wg = w.reshape(groups, cog, cpg, 3, 3)
    acc = np.zeros((n, groups, cog, h * wd), dtype=xp.dtype)
    for di in range(3):
        for dj in range(3):
            xs = xg[:, :, :, di:di + h, dj:dj + wd].reshape(n, groups, cpg, h * wd)
            acc += np.matmul(wg[:, :, :, di, dj], xs)
    acc += b.reshape(groups, cog)[None, :, :, None]
    return acc.reshape(n, cout, h, wd)


def conv3x3_backward(xp, w, gy):
    n, cin, hp, wp = xp.shape
    cout, cpg = w.shape[0], w.shape[1]
    groups = cin // cpg
    h, wd = hp - 2, wp - 2
    gb = gy.sum(axis=(0, 2, 3), dtype=w.dtype)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    if groups == cin and cpg == 1 and cout == cin:
        for di in range(3):
            for dj in range(3):
                xs = xp[:, :, di:di + h, dj:dj + wd]
                gw[:, 0, di, dj] = (gy * xs).sum(axis=(0, 2, 3), dtype=w.dtype)
                gxp[:, :, di:di + h, dj:dj + wd] += w[None, :, 0, di, dj, None, None] * gy
        return gxp, gw, gb
    if groups == 1:
        gym = gy.reshape(n, cout, h * wd)
        gyt = gym.transpose(1, 0, 2).reshape(cout, n * h * wd)
        for di in range(3):
            for dj in range(3):
                xs = xp[:, :, di:di + h, dj:dj + wd].reshape(n, cin, h * wd)
                gw[:, :, di, dj] = gyt @ xs.transpose(0, 2, 1).reshape(n * h * wd, cin)
                gxs = np.matmul(w[:, :, di, dj].T, gym)
                gxp[:, :, di:di + h, dj:dj + wd] += gxs.reshape(n, cin, h, wd)
        return gxp, gw, gb
    cog = cout // groups
    gyg = gy.reshape(n, groups, cog, h * wd)
    xg = xp.reshape(n, groups, cpg, hp, wp)
    gxg = gxp.reshape(n, groups, cpg, hp, wp)
    wg = w.reshape(groups, cog, cpg, 3, 3)
    gwg = gw.reshape(groups, cog, cpg, 3, 3)
    for di in range(3):
        for dj in range(3):
            xs = xg[:, :, :, di:di + h, dj:dj + wd].reshape(n, groups, cpg, h * wd)
            gwg[:, :, :, di, dj] = np.einsum("ngof,ngcf->goc", gyg, xs, optimize=True)
            gxs = np.matmul(wg[:, :, :, di, dj].transpose(0, 2, 1), gyg)
            gxg[:, :, :, di:di + h, dj:dj + wd] += gxs.reshape(n, groups, cpg, h, wd)
    return gxp, gw, gb


def box_pool_sums(x, up, down, left, right):
    """Windowed sums over rows [i-up, i+down] and cols [j-left, j+right],
    clipped to the image; float64 via integral images."""
    n, c, h, w = x.shape
    s = np.zeros((n, c, h + 1, w + 1), dtype=np.float64)
    s[:, :, 1:, 1:] = x.astype(np.float64).cumsum(axis=2).cumsum(axis=3)
    i = np.arange(h)
    j = np.arange(w)
    r0 = np.clip(i - up, 0, h)
    r1 = np.clip(i + down + 1, 0, h)
    c0 = np.clip(j - left, 0, w)
    c1 = np.clip(j + right + 1, 0, w)
    return (s[:, :, r1[:, None], c1[None, :]] - s[:, :, r0[:, None], c1[None, :]]
            - s[:, :, r1[:, None], c0[None, :]] + s[:, :, r0[:, None], c0[None, :]])
