"""Stereo dataset handling: PNG I/O, bicubic degradation, patch
extraction, augmentation, the synthetic stereo-pair generator, and the
line-oriented dataset manifest.

Images move through this module as raw float arrays of shape (1, 3, h, w)
with values in [0, 1]; the training loop wraps them into tensors at the
graph boundary.
"""

import functools
import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError


@dataclass
class StereoSample:
    """One aligned stereo record: LR pair plus HR pair at scale x."""

    lr_l: np.ndarray
    lr_r: np.ndarray
    hr_l: np.ndarray
    hr_r: np.ndarray
    scale: int
    name: str = ""

    def validate(self):
        if self.lr_l.shape != self.lr_r.shape or self.hr_l.shape != self.hr_r.shape:
            raise DataError(f"sample {self.name!r}: view shapes differ")
        n, c, h, w = self.lr_l.shape
        if self.hr_l.shape != (n, c, h * self.scale, w * self.scale):
            raise DataError(f"sample {self.name!r}: HR shape {self.hr_l.shape} is "
                            f"not {self.scale}x the LR shape {self.lr_l.shape}")
        return self


@dataclass(frozen=True)
class AugmentationConfig:
    hflip: bool = True
    vflip: bool = True
    channel_shuffle: bool = True
    seed: int = 0  # augmentation stream per epoch = default_rng((seed, 2, epoch))


def load_png(path, dtype=np.float32):
    """8-bit RGB PNG -> (1,3,h,w) floats in [0,1] (divide by 255)."""
    dtype = np.dtype(dtype)
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise DataError(f"{path}: expected an RGB image, got mode "
                                f"{img.mode!r}")
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: unreadable image ({e})") from e
    return (arr.astype(dtype) / dtype.type(255)).transpose(2, 0, 1)[None]


def save_png(path, img):
    """(1,3,h,w) floats -> 8-bit RGB PNG, round half up, clamped."""
    x = np.asarray(img)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise DataError(f"save_png needs a (1,3,h,w) array, got {x.shape}")
    q = np.clip(np.floor(x[0] * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def _cubic_kernel(t):
    """Keys cubic convolution kernel, a = -0.5."""
    t = np.abs(t)
    a = -0.5
    out = np.where(t <= 1,
                   (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
                   np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a,
                            0.0))
    return out


@functools.lru_cache(maxsize=32)
def _bicubic_down_matrix(size, s):
    """Dense (size/s, size) antialiased bicubic row-sampling matrix.

    Kernel support is widened by s (4s taps), indices are edge-clamped with
    weight accumulation, and each row is normalized to sum 1.
    """
    out_size = size // s
    m = np.zeros((out_size, size), dtype=np.float64)
    for o in range(out_size):
        src = (o + 0.5) * s - 0.5
        lo = math.ceil(src - 2 * s)
        hi = math.floor(src + 2 * s)
        idx = np.arange(lo, hi + 1)
        w = _cubic_kernel((idx - src) / s)
        w = w / w.sum()
        np.add.at(m[o], np.clip(idx, 0, size - 1), w)
    return m


def bicubic_downsample(hr, s):
    """Separable antialiased bicubic downsample of a (n,c,H,W) array."""
    if s not in (2, 4):
        raise ConfigError(f"downsample scale must be 2 or 4, got {s}")
    n, c, h, w = hr.shape
    if h % s or w % s:
        raise DataError(f"image {h}x{w} not divisible by scale {s}")
    my = _bicubic_down_matrix(h, s)
    mx = _bicubic_down_matrix(w, s)
    lr = np.matmul(np.matmul(my, hr.astype(np.float64)), mx.T)
    return lr.astype(hr.dtype)


def extract_patches(sample, patch, stride):
    """All aligned (ph,pw) LR patches at the given stride, with their
    s-scaled HR patches; empty list when the image is undersized."""
    ph, pw = patch
    s = sample.scale
    _, _, h, w = sample.lr_l.shape
    if h < ph or w < pw:
        return []
    out = []
    for y in range(0, h - ph + 1, stride):
        for x in range(0, w - pw + 1, stride):
            out.append(StereoSample(
                lr_l=sample.lr_l[:, :, y:y + ph, x:x + pw],
                lr_r=sample.lr_r[:, :, y:y + ph, x:x + pw],
                hr_l=sample.hr_l[:, :, s * y:s * (y + ph), s * x:s * (x + pw)],
                hr_r=sample.hr_r[:, :, s * y:s * (y + ph), s * x:s * (x + pw)],
                scale=s,
                name=f"{sample.name}+{y}+{x}"))
    return out


def augment(sample, cfg, rng):
    """Flips and channel shuffle, each applied with probability 1/2.

    A horizontal flip also swaps the views: mirroring alone would make
    scene points sit left of their other-view match, flipping the sign of
    every disparity; the swap restores the rectified-stereo convention.
    The same transform hits all four images so LR stays aligned with HR.
    Draw order is fixed: hflip, vflip, channel shuffle.
    """
    ll, lr, hl, hr = sample.lr_l, sample.lr_r, sample.hr_l, sample.hr_r
    if cfg.hflip and rng.random() < 0.5:
        ll, lr = lr[:, :, :, ::-1], ll[:, :, :, ::-1]
        hl, hr = hr[:, :, :, ::-1], hl[:, :, :, ::-1]
    if cfg.vflip and rng.random() < 0.5:
        ll, lr = ll[:, :, ::-1], lr[:, :, ::-1]
        hl, hr = hl[:, :, ::-1], hr[:, :, ::-1]
    if cfg.channel_shuffle and rng.random() < 0.5:
        perm = rng.permutation(3)
        ll, lr = ll[:, perm], lr[:, perm]
        hl, hr = hl[:, perm], hr[:, perm]
    return StereoSample(np.ascontiguousarray(ll), np.ascontiguousarray(lr),
                        np.ascontiguousarray(hl), np.ascontiguousarray(hr),
                        sample.scale, sample.name)


def _band_noise(rng, h, w, sigma):
    """Zero-mean unit-amplitude noise low-passed with a Gaussian of width
    sigma (small sigma keeps energy above the LR Nyquist rate)."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    transfer = np.exp(-2 * (math.pi * sigma) ** 2 * (fy ** 2 + fx ** 2))
    out = np.fft.irfft2(np.fft.rfft2(noise) * transfer, s=(h, w))
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _synth_scene(rng, h, w, max_disparity):
    """One HR stereo pair: textured depth layers, nearer layers shifted
    farther between the views.  Returns (left, right, disparities)."""
    # background: smooth color field + mild texture kept mostly below the
    # LR Nyquist rate so the pair stays SR-recoverable
    left = np.empty((3, h, w))
    base = rng.uniform(0.25, 0.75, size=3)
    grad = _band_noise(rng, h, w, sigma=8.0)
    fine = _band_noise(rng, h, w, sigma=1.8)
    for ch in range(3):
        left[ch] = base[ch] + 0.18 * grad + 0.12 * fine
    # a far plane at disparity 1 (odd: the views sample complementary
    # sub-pixel phases after downsampling) unless disparity is forced off
    bg_d = 1 if max_disparity >= 1 else 0
    right = np.roll(left, -bg_d, axis=2)
    disparities = [bg_d]

    n_layers = int(rng.integers(2, 5))
    if max_disparity > 0:
        disps = sorted(set(int(d) for d in
                           rng.integers(1, max_disparity + 1, size=n_layers)))
        if not any(d % 2 for d in disps):
            disps[0] = max(1, disps[0] - 1)  # keep a sub-pixel phase at LR scale
    else:
        disps = [0] * n_layers
    for li in range(n_layers):
        d = disps[li % len(disps)]
        disparities.append(d)
        tint = rng.uniform(0.15, 0.85, size=3)
        tex = 0.35 * _band_noise(rng, h, w, sigma=float(rng.uniform(1.6, 2.6))) \
            + 0.3 * _band_noise(rng, h, w, sigma=4.0)
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(2, 5))):
            bh = int(rng.integers(h // 6, h // 2 + 1))
            bw = int(rng.integers(w // 6, w // 2 + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            mask[y0:y0 + bh, x0:x0 + bw] = True
        layer = np.clip(tint[:, None, None] + 0.35 * tex, 0.0, 1.0)
        left = np.where(mask, layer, left)
        # a point at left column x appears at right column x - d
        mask_r = np.roll(mask, -d, axis=1)
        layer_r = np.roll(layer, -d, axis=2)
        right = np.where(mask_r, layer_r, right)
    return np.clip(left, 0, 1)[None], np.clip(right, 0, 1)[None], disparities


def synth_stereo(out_dir, seed, count, size, max_disparity, scale):
    """Write a procedural stereo dataset (HR + bicubic LR PNGs) and its
    manifest; returns the manifest path."""
    h, w = size
    if max_disparity >= w // 4:
        raise ConfigError(f"max_disparity {max_disparity} too large for "
                          f"width {w} (must be < width/4)")
    if h % scale or w % scale:
        raise ConfigError(f"size {h}x{w} not divisible by scale {scale}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        hr_l, hr_r, disps = _synth_scene(rng, h, w, max_disparity)
        names = {}
        for tag, img in (("hr_l", hr_l), ("hr_r", hr_r)):
            names[tag] = f"{i:04d}_{tag}.png"
            save_png(os.path.join(out_dir, names[tag]), img)
        # degrade the quantized images so LR matches what training reloads
        hq_l = load_png(os.path.join(out_dir, names["hr_l"]), np.float64)
        hq_r = load_png(os.path.join(out_dir, names["hr_r"]), np.float64)
        for tag, img in (("lr_l", bicubic_downsample(hq_l, scale)),
                         ("lr_r", bicubic_downsample(hq_r, scale))):
            names[tag] = f"{i:04d}_{tag}.png"
            save_png(os.path.join(out_dir, names[tag]), img)
        lines.append(f"{names['lr_l']} {names['lr_r']} {names['hr_l']} "
                     f"{names['hr_r']} {scale} "
                     f"{','.join(str(d) for d in disps) or '0'}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("# lr_l lr_r hr_l hr_r scale disparities\n")
        f.write("\n".join(lines) + "\n")
    return manifest


def load_manifest(path):
    """Parse a manifest into (records, scale); records hold absolute paths."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    scale = None
    try:
        with open(path) as f:
            raw = f.read().splitlines()
    except OSError as e:
        raise DataError(f"{path}: cannot read manifest ({e})") from e
    for ln, line in enumerate(raw, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise DataError(f"{path}:{ln}: expected at least 5 fields, got "
                            f"{len(parts)}")
        paths = [p if os.path.isabs(p) else os.path.join(base, p)
                 for p in parts[:4]]
        try:
            s = int(parts[4])
        except ValueError:
            raise DataError(f"{path}:{ln}: scale {parts[4]!r} is not an integer")
        if scale is None:
            scale = s
        elif scale != s:
            raise DataError(f"{path}:{ln}: mixed scales {scale} and {s}")
        records.append({"paths": paths, "scale": s,
                        "name": os.path.basename(parts[0]).rsplit("_", 1)[0]})
    if not records:
        raise DataError(f"{path}: manifest lists no samples")
    return records, scale


def load_sample(record, dtype=np.float32):
    ll, lr, hl, hr = (load_png(p, dtype) for p in record["paths"])
    return StereoSample(ll, lr, hl, hr, record["scale"],
                        record["name"]).validate()
