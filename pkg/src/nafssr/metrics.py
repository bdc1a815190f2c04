"""PSNR/SSIM, the stereo evaluation protocol (left-crop and pair-average
modes), self-ensemble inference, and multi-checkpoint output averaging.

Images are (1,3,h,w) float arrays in [0,1]; model outputs are clipped to
[0,1] before scoring so metrics reflect displayable images.
"""

import itertools
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .data import load_manifest, load_sample
from .errors import ConfigError, DataError, ShapeError
from .model import model_forward
from .tlsc import GLOBAL_POOL

PSNR_CAP = 100.0


def psnr(a, b):
    """10·log10(1/MSE) over all elements, capped at 100 dB; inputs in [0,1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


_SSIM_WIN = _gaussian_window()


def ssim(a, b):
    """Mean windowed SSIM over channels: 11x11 Gaussian window sigma 1.5,
    K1=0.01, K2=0.03, dynamic range 1, valid-mode windows only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    a = a.reshape(-1, a.shape[-2], a.shape[-1])
    b = b.reshape(-1, b.shape[-2], b.shape[-1])
    h, w = a.shape[-2:]
    if min(h, w) < 11:
        raise ShapeError(f"ssim needs images at least 11x11, got {h}x{w}")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    win = _SSIM_WIN

    def filt(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (11, 11), axis=(-2, -1))
        return np.tensordot(v, win, axes=([-2, -1], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    name: str
    psnr_left_crop: float
    ssim_left_crop: float
    psnr_pair: float
    ssim_pair: float


@dataclass
class MetricReport:
    dataset: str
    scale: int
    policy: str
    pair_mode: str
    rows: List[MetricRow] = field(default_factory=list)

    def mean(self, attr):
        return float(np.mean([getattr(r, attr) for r in self.rows]))

    def to_text(self):
        lines = [f"dataset: {self.dataset}",
                 f"scale: x{self.scale}  pooling: {self.policy}  "
                 f"pair mode: {self.pair_mode}",
                 f"{'sample':<24} {'PSNR(Lcrop)':>12} {'SSIM(Lcrop)':>12} "
                 f"{'PSNR(pair)':>12} {'SSIM(pair)':>12}"]
        for r in self.rows:
            lines.append(f"{r.name:<24} {r.psnr_left_crop:>12.4f} "
                         f"{r.ssim_left_crop:>12.6f} {r.psnr_pair:>12.4f} "
                         f"{r.ssim_pair:>12.6f}")
        lines.append(f"{'MEAN':<24} {self.mean('psnr_left_crop'):>12.4f} "
                     f"{self.mean('ssim_left_crop'):>12.6f} "
                     f"{self.mean('psnr_pair'):>12.4f} "
                     f"{self.mean('ssim_pair'):>12.6f}")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "dataset": self.dataset, "scale": self.scale, "policy": self.policy,
            "pair_mode": self.pair_mode,
            "rows": [vars(r) for r in self.rows],
            "mean": {k: self.mean(k) for k in
                     ("psnr_left_crop", "ssim_left_crop",
                      "psnr_pair", "ssim_pair")},
        }

    def save(self, path_base):
        with open(path_base + ".txt", "w") as f:
            f.write(self.to_text() + "\n")
        with open(path_base + ".json", "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _infer(store, lr_l, lr_r, pool):
    with ad.no_grad():
        sl, sr = model_forward(store, ad.Tensor4(lr_l), ad.Tensor4(lr_r),
                               pool=pool)
    return np.clip(sl.data, 0.0, 1.0), np.clip(sr.data, 0.0, 1.0)


def _pair_scores(sl, sr, hl, hr, pair_mode):
    if pair_mode == "score_mean":
        return ((psnr(sl, hl) + psnr(sr, hr)) / 2.0,
                (ssim(sl[0], hl[0]) + ssim(sr[0], hr[0])) / 2.0)
    if pair_mode == "image_mean":
        mo = (sl + sr) / 2.0
        mt = (hl + hr) / 2.0
        return psnr(mo, mt), ssim(mo[0], mt[0])
    raise ConfigError(f"pair_mode {pair_mode!r}; expected score_mean or "
                      f"image_mean")


LEFT_CROP = 64


def evaluate(store, manifest_path, pool=GLOBAL_POOL, pair_mode="score_mean",
             infer_fn=None):
    """Score a checkpointed model over a manifest under both protocols:
    left view with its leftmost 64 columns cropped, and the pair average."""
    records, scale = load_manifest(manifest_path)
    if scale != store.config.scale:
        raise ConfigError(f"model scale {store.config.scale} != dataset "
                          f"scale {scale}")
    dtype = np.dtype(store.config.dtype)
    policy = pool.mode if pool.mode == "global" else \
        f"local{pool.window[0]}x{pool.window[1]}"
    report = MetricReport(dataset=manifest_path, scale=scale, policy=policy,
                          pair_mode=pair_mode)
    run = infer_fn if infer_fn is not None else \
        (lambda ll, rr: _infer(store, ll, rr, pool))
    for rec in records:
        s = load_sample(rec, dtype)
        sl, sr = run(s.lr_l, s.lr_r)
        if s.hr_l.shape[3] <= LEFT_CROP:
            raise DataError(f"{rec['name']}: width {s.hr_l.shape[3]} leaves "
                            f"nothing after the {LEFT_CROP}px left crop")
        p_l = psnr(sl[:, :, :, LEFT_CROP:], s.hr_l[:, :, :, LEFT_CROP:])
        s_l = ssim(sl[0, :, :, LEFT_CROP:], s.hr_l[0, :, :, LEFT_CROP:])
        p_p, s_p = _pair_scores(sl, sr, s.hr_l, s.hr_r, pair_mode)
        report.rows.append(MetricRow(rec["name"], p_l, s_l, p_p, s_p))
    return report


def _all_transforms():
    """The 24 invertible test-time transforms: 2 vflip x 2 hflip x 6
    channel permutations."""
    perms = list(itertools.permutations(range(3)))
    return [(vf, hf, perm) for vf in (0, 1) for hf in (0, 1) for perm in perms]


def self_ensemble_infer(store, lr_l, lr_r, pool=GLOBAL_POOL):
    """Average the model over all 24 flip/permutation transforms.

    The horizontal-flip members swap the views on the way in and back on
    the way out, mirroring the training augmentation.  Returns
    (sr_l, sr_r, member_labels); the average is accumulated in float64.
    """
    members = _all_transforms()
    acc_l = None
    acc_r = None
    labels = []
    for vf, hf, perm in members:
        ll, rr = lr_l[:, perm], lr_r[:, perm]
        if vf:
            ll, rr = ll[:, :, ::-1], rr[:, :, ::-1]
        if hf:
            ll, rr = rr[:, :, :, ::-1], ll[:, :, :, ::-1]
        sl, sr = _infer(store, np.ascontiguousarray(ll),
                        np.ascontiguousarray(rr), pool)
        if hf:
            sl, sr = sr[:, :, :, ::-1], sl[:, :, :, ::-1]
        if vf:
            sl, sr = sl[:, :, ::-1], sr[:, :, ::-1]
        inv = np.argsort(perm)
        sl, sr = sl[:, inv], sr[:, inv]
        acc_l = sl.astype(np.float64) if acc_l is None else acc_l + sl
        acc_r = sr.astype(np.float64) if acc_r is None else acc_r + sr
        labels.append(f"vflip={vf} hflip={hf} perm={''.join('RGB'[i] for i in perm)}")
    dtype = np.dtype(store.config.dtype)
    return ((acc_l / len(members)).astype(dtype),
            (acc_r / len(members)).astype(dtype), labels)


def average_outputs(stores, lr_l, lr_r, pool=GLOBAL_POOL):
    """Arithmetic mean of several models' outputs (float64 accumulation)."""
    if not stores:
        raise ConfigError("average_outputs needs at least one model")
    scales = {st.config.scale for st in stores}
    if len(scales) != 1:
        raise ConfigError(f"cannot average models of different scales {scales}")
    acc_l = acc_r = None
    for st in stores:
        sl, sr = _infer(st, lr_l, lr_r, pool)
        acc_l = sl.astype(np.float64) if acc_l is None else acc_l + sl
        acc_r = sr.astype(np.float64) if acc_r is None else acc_r + sr
    dtype = np.dtype(stores[0].config.dtype)
    return ((acc_l / len(stores)).astype(dtype),
            (acc_r / len(stores)).astype(dtype))
