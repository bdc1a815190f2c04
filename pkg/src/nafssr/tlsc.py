"""Pooling policies for channel attention.

Training uses a global average pool; at inference the statistics it feeds
to the gate can instead come from a local window (1.5x the training patch)
so full-image statistics match what the model saw on patches.  The local
pool is an edge-clipped true mean: border windows average only in-bounds
pixels, never zero padding.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff
from .backend import kernels
from .errors import ConfigError


@dataclass(frozen=True)
class PoolingPolicy:
    mode: str = "global"
    window: Optional[Tuple[int, int]] = None  # (kh, kw) pixels, local mode only

    def __post_init__(self):
        if self.mode not in ("global", "local"):
            raise ConfigError(f"pooling mode {self.mode!r}; expected global or local")
        if self.mode == "local":
            if (self.window is None or len(self.window) != 2
                    or self.window[0] < 1 or self.window[1] < 1):
                raise ConfigError(f"local pooling needs a positive (kh, kw) window, "
                                  f"got {self.window!r}")
        elif self.window is not None:
            raise ConfigError("global pooling takes no window")


GLOBAL_POOL = PoolingPolicy()


def tlsc_window_from_patch(train_patch):
    """Local-statistics window for a model trained on the given LR patch:
    1.5x the patch size, rounded half up."""
    ph, pw = train_patch
    if ph < 1 or pw < 1:
        raise ConfigError(f"patch size must be positive, got {train_patch!r}")
    return (int(math.floor(1.5 * ph + 0.5)), int(math.floor(1.5 * pw + 0.5)))


def _window_offsets(window):
    kh, kw = window
    return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2


def _window_counts(h, w, window):
    """Per-location count of in-bounds pixels in the clipped window."""
    up, down, left, right = _window_offsets(window)
    i = np.arange(h)
    j = np.arange(w)
    ch = np.clip(i + down + 1, 0, h) - np.clip(i - up, 0, h)
    cw = np.clip(j + right + 1, 0, w) - np.clip(j - left, 0, w)
    return (ch[:, None] * cw[None, :]).astype(np.float64)


def box_mean(xd, window):
    """Edge-clipped windowed mean of a raw (n,c,h,w) array, float64."""
    up, down, left, right = _window_offsets(window)
    sums = kernels().box_pool_sums(xd, up, down, left, right)
    cnt = _window_counts(xd.shape[2], xd.shape[3], window)
    return sums / cnt


def box_mean_adjoint(gp, h, w, window, dtype):
    """Adjoint of box_mean: scatter each window mean's gradient back.

    Membership is symmetric under reflecting the window offsets, so the
    adjoint is another clipped box sum of gp/count with up/down and
    left/right swapped.
    """
    up, down, left, right = _window_offsets(window)
    cnt = _window_counts(h, w, window)
    return kernels().box_pool_sums(gp / cnt, down, up, right, left).astype(dtype)


def local_avg_pool(x, window):
    """Differentiable per-location windowed mean, same spatial shape."""
    if window[0] < 1 or window[1] < 1:
        raise ConfigError(f"window must be positive, got {window!r}")
    n, c, h, w = x.shape
    out = box_mean(x.data, window).astype(x.dtype)
    dtype = x.dtype

    def backward_fn(gy):
        return (box_mean_adjoint(gy.astype(np.float64), h, w, window, dtype),)

    return autodiff.from_op("local_avg_pool", out, (x,), backward_fn)
