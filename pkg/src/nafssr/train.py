"""Optimization: L1 loss on both views, AdamW with cosine-annealed
learning rate, per-unit stochastic depth, deterministic data order, and a
binary checkpoint format whose save -> load -> save round trip is
byte-identical (training resumes bitwise).

RNG discipline: every random choice flows from a named stream derived
from the global seed:
  (seed, 0)        parameter init
  (seed, 1, epoch) sample order for that epoch
  (seed, 2, epoch) augmentation draws for that epoch
  (seed, 3)        stochastic-depth draws (continuous across epochs)
Epoch-scoped streams are re-derivable from (seed, epoch); live stream
states are additionally stored in checkpoints so a resume continues
mid-epoch without replaying.
"""

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .data import (AugmentationConfig, augment, extract_patches,
                   load_manifest, load_sample)
from .errors import ConfigError, DataError, NumericsError
from .model import ModelConfig, ParamStore, build_model, model_forward

STREAM_INIT, STREAM_ORDER, STREAM_AUG, STREAM_DROP = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 100
    batch: int = 32
    lr_init: float = 3e-3
    lr_final: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 0.0
    eps: float = 1e-8
    seed: int = 0
    patch: Tuple[int, int] = (30, 90)
    stride: int = 20
    hflip: bool = True
    vflip: bool = True
    channel_shuffle: bool = True
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if self.lr_final >= self.lr_init:
            raise ConfigError(f"lr_final {self.lr_final} must be below lr_init "
                              f"{self.lr_init}")
        if self.iters < 1 or self.batch < 1:
            raise ConfigError("iters and batch must be positive")


def l1_loss(sr_l, sr_r, hr_l, hr_r):
    """Sum of the two per-view mean absolute errors (a (1,1,1,1) scalar)."""
    return ad.add(ad.mean_abs_diff(sr_l, hr_l), ad.mean_abs_diff(sr_r, hr_r))


def cosine_lr(t, cfg):
    """Cosine annealing from lr_init (t=0) to lr_final (t=iters), with the
    endpoints returned exactly."""
    if t <= 0:
        return cfg.lr_init
    if t >= cfg.iters:
        return cfg.lr_final
    span = cfg.lr_init - cfg.lr_final
    return cfg.lr_final + span * (1.0 + math.cos(math.pi * t / cfg.iters)) / 2.0


class AdamW:
    """Decoupled-weight-decay Adam; slots and step counts are per
    parameter so that parameters absent from a step (dropped units) keep
    their bias correction consistent."""

    def __init__(self, store, cfg):
        self.store = store
        self.cfg = cfg
        self.state = {name: {"step": 0,
                             "m": np.zeros_like(t.data),
                             "v": np.zeros_like(t.data)}
                      for name, t in store.items()}
        self.rejected = 0

    def step(self, lr):
        """Apply one update from the .grad fields; returns False (and
        leaves all state untouched) if any gradient is non-finite."""
        cfg = self.cfg
        updates = [(name, t) for name, t in self.store.items()
                   if t.grad is not None]
        for name, t in updates:
            if not np.isfinite(t.grad).all():
                self.rejected += 1
                return False
        for name, t in updates:
            s = self.state[name]
            s["step"] += 1
            g = t.grad
            s["m"] = cfg.beta1 * s["m"] + (1.0 - cfg.beta1) * g
            s["v"] = cfg.beta2 * s["v"] + (1.0 - cfg.beta2) * (g * g)
            mhat = s["m"] / (1.0 - cfg.beta1 ** s["step"])
            vhat = s["v"] / (1.0 - cfg.beta2 ** s["step"])
            if cfg.weight_decay:
                t.data *= 1.0 - lr * cfg.weight_decay
            t.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(t.dtype)
        return True


def adamw_step(store, opt, lr):
    """Functional wrapper over AdamW.step for symmetry with the tests."""
    return opt.step(lr)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic | version u32 | header-length u64 | header JSON | tensor payloads
# (store order, little-endian) | adam m,v payloads (same order)
_MAGIC = b"NAFSSRCK"
_VERSION = 1


def save_checkpoint(path, store, opt=None, extra=None):
    header = {
        "model_config": store.config.to_dict(),
        "tensors": [{"name": n, "dtype": str(t.dtype), "shape": list(t.shape)}
                    for n, t in store.items()],
        "adam": None,
        "extra": extra or {},
    }
    if opt is not None:
        header["adam"] = {
            "beta1": opt.cfg.beta1, "beta2": opt.cfg.beta2,
            "weight_decay": opt.cfg.weight_decay, "eps": opt.cfg.eps,
            "steps": {n: s["step"] for n, s in opt.state.items()},
            "rejected": opt.rejected,
        }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for _, t in store.items():
            f.write(np.ascontiguousarray(t.data, dtype=t.data.dtype)
                    .astype(t.data.dtype.newbyteorder("<")).tobytes())
        if opt is not None:
            for n, _ in store.items():
                s = opt.state[n]
                f.write(s["m"].astype(s["m"].dtype.newbyteorder("<")).tobytes())
                f.write(s["v"].astype(s["v"].dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, train_cfg=None):
    """Returns (store, opt or None, extra dict)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"{path}: cannot read checkpoint ({e})") from e
    if raw[:8] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    cfg = ModelConfig.from_dict(header["model_config"])
    store = build_model(cfg, seed=0)
    names = store.names()
    listed = [t["name"] for t in header["tensors"]]
    if listed != names:
        raise DataError(f"{path}: checkpoint tensors do not match the model "
                        f"built from its config")
    off = 20 + hlen
    for meta in header["tensors"]:
        dt = np.dtype(meta["dtype"]).newbyteorder("<")
        shape = tuple(meta["shape"])
        nbytes = dt.itemsize * int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)),
                            offset=off).reshape(shape)
        store[meta["name"]].data[...] = arr
        off += nbytes
    opt = None
    if header["adam"] is not None:
        a = header["adam"]
        if train_cfg is None:
            train_cfg = TrainConfig(beta1=a["beta1"], beta2=a["beta2"],
                                    weight_decay=a["weight_decay"], eps=a["eps"])
        opt = AdamW(store, train_cfg)
        opt.rejected = a["rejected"]
        for meta in header["tensors"]:
            dt = np.dtype(meta["dtype"]).newbyteorder("<")
            shape = tuple(meta["shape"])
            n_el = int(np.prod(shape))
            s = opt.state[meta["name"]]
            s["step"] = a["steps"][meta["name"]]
            s["m"] = np.frombuffer(raw, dt, n_el, off).reshape(shape).astype(dt.newbyteorder("="))
            off += dt.itemsize * n_el
            s["v"] = np.frombuffer(raw, dt, n_el, off).reshape(shape).astype(dt.newbyteorder("="))
            off += dt.itemsize * n_el
    return store, opt, header["extra"]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _load_patch_pool(manifest_path, patch, stride, dtype):
    records, scale = load_manifest(manifest_path)
    pool = []
    for rec in records:
        pool.extend(extract_patches(load_sample(rec, dtype), patch, stride))
    if not pool:
        raise DataError(f"{manifest_path}: no sample is at least "
                        f"{patch[0]}x{patch[1]} at LR scale")
    return pool, scale


def _stack(samples):
    return (np.concatenate([s.lr_l for s in samples]),
            np.concatenate([s.lr_r for s in samples]),
            np.concatenate([s.hr_l for s in samples]),
            np.concatenate([s.hr_r for s in samples]))


def train(train_cfg, model_cfg, manifest_path, out_dir, resume=None,
          log=print, eval_hook=None):
    """Run (or resume) training; returns the final checkpoint path.

    Deterministic given the seed: sample order, augmentation, drop
    decisions, and init all flow from the named streams in the module
    docstring.  Writes checkpoints at the configured cadence and appends
    `iter lr loss` lines to <out_dir>/train_log.txt.
    """
    os.makedirs(out_dir, exist_ok=True)
    dtype = np.dtype(model_cfg.dtype)
    pool, data_scale = _load_patch_pool(manifest_path, train_cfg.patch,
                                        train_cfg.stride, dtype)
    if data_scale != model_cfg.scale:
        raise ConfigError(f"model scale {model_cfg.scale} != dataset scale "
                          f"{data_scale}")
    if model_cfg.train_patch is None:
        model_cfg = replace(model_cfg, train_patch=tuple(train_cfg.patch))

    aug_cfg = AugmentationConfig(train_cfg.hflip, train_cfg.vflip,
                                 train_cfg.channel_shuffle, train_cfg.seed)
    seed = train_cfg.seed

    if resume is not None:
        store, opt, extra = load_checkpoint(resume, train_cfg)
        if opt is None:
            opt = AdamW(store, train_cfg)
        it = extra["iteration"]
        epoch = extra["epoch"]
        cursor = extra["cursor"]
        drop_rng = np.random.default_rng(0)
        drop_rng.bit_generator.state = extra["rng_drop"]
        aug_rng = np.random.default_rng(0)
        aug_rng.bit_generator.state = extra["rng_aug"]
    else:
        store = build_model(model_cfg, (seed, STREAM_INIT))
        opt = AdamW(store, train_cfg)
        it, epoch, cursor = 0, 0, 0
        drop_rng = np.random.default_rng((seed, STREAM_DROP))
        aug_rng = np.random.default_rng((seed, STREAM_AUG, 0))

    order = np.random.default_rng((seed, STREAM_ORDER, epoch)) \
        .permutation(len(pool))
    log_path = os.path.join(out_dir, "train_log.txt")
    log_file = open(log_path, "a")
    t_start = time.monotonic()

    def checkpoint(tag):
        path = os.path.join(out_dir, f"ckpt_{tag}.nck")
        save_checkpoint(path, store, opt, extra={
            "iteration": it, "epoch": epoch, "cursor": cursor,
            "seed": seed,
            "rng_drop": drop_rng.bit_generator.state,
            "rng_aug": aug_rng.bit_generator.state,
            "train_patch": list(train_cfg.patch),
        })
        return path

    while it < train_cfg.iters:
        batch = []
        for _ in range(train_cfg.batch):
            if cursor >= len(order):
                epoch += 1
                cursor = 0
                order = np.random.default_rng((seed, STREAM_ORDER, epoch)) \
                    .permutation(len(pool))
                aug_rng = np.random.default_rng((seed, STREAM_AUG, epoch))
            batch.append(augment(pool[order[cursor]], aug_cfg, aug_rng))
            cursor += 1
        lr_l, lr_r, hr_l, hr_r = _stack(batch)
        sr_l, sr_r = model_forward(store, ad.Tensor4(lr_l), ad.Tensor4(lr_r),
                                   train=True, rng=drop_rng)
        loss = l1_loss(sr_l, sr_r, ad.Tensor4(hr_l), ad.Tensor4(hr_r))
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise NumericsError(f"non-finite loss at iteration {it}")
        ad.backward(loss)
        lr = cosine_lr(it, train_cfg)
        if not opt.step(lr):
            log(f"iter={it} rejected non-finite gradient (incident "
                f"#{opt.rejected})")
        it += 1
        line = f"iter={it} lr={lr:.6e} loss={loss_val:.6e}"
        log_file.write(line + "\n")
        if it % train_cfg.log_every == 0 or it == train_cfg.iters:
            log(f"{line} ({time.monotonic() - t_start:.1f}s)")
        if train_cfg.checkpoint_every and it % train_cfg.checkpoint_every == 0 \
                and it < train_cfg.iters:
            checkpoint(f"{it:08d}")
        if eval_hook is not None:
            eval_hook(it, store)
    final = checkpoint("final")
    log_file.close()
    return final
