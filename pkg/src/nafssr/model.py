"""Model assembly: a shared-weight intro conv, a trunk of gated blocks with
cross-view fusion attached at configured depths, a pixel-shuffle upsampling
head, and a global bilinear residual.

Both views run through the same parameter tensors (weight sharing is
structural); gradients from the two views therefore accumulate into the
same slots through graph fan-out.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .blocks import (NafBlockParams, StochasticDepthDecision,
                     nafblock_forward)
from .errors import ConfigError, ShapeError
from .scam import ScamParams, scam_forward
from .tlsc import GLOBAL_POOL

# name -> (width, depth, stochastic-depth probability)
VARIANTS = {
    "T": (48, 16, 0.0),
    "S": (64, 32, 0.1),
    "B": (96, 64, 0.2),
    "L": (128, 128, 0.3),
}


@dataclass(frozen=True)
class ModelConfig:
    width: int = 48
    n_blocks: int = 16
    scale: int = 4
    scam_count: int = 16
    drop_prob: float = 0.0
    train_patch: Optional[Tuple[int, int]] = None  # LR patch the model was trained on
    dtype: str = "float32"

    def __post_init__(self):
        if self.width < 1 or self.n_blocks < 1:
            raise ConfigError(f"width/n_blocks must be positive, got "
                              f"{self.width}/{self.n_blocks}")
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if not 0 <= self.scam_count <= self.n_blocks:
            raise ConfigError(f"scam_count {self.scam_count} outside "
                              f"[0, {self.n_blocks}]")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError(f"drop_prob must be in [0,1), got {self.drop_prob}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @classmethod
    def from_variant(cls, name, scale=4, **overrides):
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; options: "
                              f"{', '.join(VARIANTS)}")
        width, depth, p = VARIANTS[name]
        fields = dict(width=width, n_blocks=depth, scale=scale,
                      scam_count=depth, drop_prob=p)
        fields.update(overrides)
        return cls(**fields)

    def to_dict(self):
        d = {"width": self.width, "n_blocks": self.n_blocks, "scale": self.scale,
             "scam_count": self.scam_count, "drop_prob": self.drop_prob,
             "dtype": self.dtype}
        if self.train_patch is not None:
            d["train_patch"] = list(self.train_patch)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "train_patch" in d and d["train_patch"] is not None:
            d["train_patch"] = tuple(d["train_patch"])
        return cls(**d)


def scam_positions(n_blocks, scam_count):
    """Block indices carrying cross-view fusion: centered, evenly spaced."""
    return frozenset(int((i + 0.5) * n_blocks / scam_count)
                     for i in range(scam_count))


class ParamStore:
    """Ordered name -> trainable tensor map plus the assembled module tree."""

    def __init__(self, config):
        self.config = config
        self._params = {}
        self.intro = None
        self.blocks = []
        self.scams = {}
        self.head = None

    def add(self, name, array):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = ad.Tensor4(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def count(self):
        return sum(t.data.size for t in self._params.values())


def count_params(store):
    return store.count()


def build_model(cfg, seed):
    """Instantiate all parameters deterministically from the seed."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    store = ParamStore(cfg)

    def conv(name, cin, cout, k, groups=1):
        fan_in = (cin // groups) * k * k
        bound = math.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, (cout, cin // groups, k, k)).astype(dtype)
        weight = store.add(f"{name}.weight", w)
        bias = store.add(f"{name}.bias", np.zeros((1, cout, 1, 1), dtype))
        return nn.ConvParams(weight, bias, groups)

    def layernorm(name, c):
        return nn.LayerNormParams(
            store.add(f"{name}.weight", np.ones((1, c, 1, 1), dtype)),
            store.add(f"{name}.bias", np.zeros((1, c, 1, 1), dtype)))

    def zeros_scale(name, c):
        return store.add(name, np.zeros((1, c, 1, 1), dtype))

    c = cfg.width
    store.intro = conv("intro", 3, c, 3)
    positions = scam_positions(cfg.n_blocks, cfg.scam_count) \
        if cfg.scam_count else frozenset()
    for i in range(cfg.n_blocks):
        b = f"block{i}"
        store.blocks.append(NafBlockParams(
            ln1=layernorm(f"{b}.ln1", c),
            conv_expand=conv(f"{b}.expand", c, 2 * c, 1),
            conv_dw=conv(f"{b}.dw", 2 * c, 2 * c, 3, groups=2 * c),
            sca=conv(f"{b}.sca", c, c, 1),
            conv_proj=conv(f"{b}.proj", c, c, 1),
            ln2=layernorm(f"{b}.ln2", c),
            ffn_expand=conv(f"{b}.ffn_expand", c, 2 * c, 1),
            ffn_proj=conv(f"{b}.ffn_proj", c, c, 1),
            beta=zeros_scale(f"{b}.beta", c),
            gamma_ffn=zeros_scale(f"{b}.gamma_ffn", c)))
        if i in positions:
            s = f"scam{i}"
            store.scams[i] = ScamParams(
                ln_l=layernorm(f"{s}.ln_l", c),
                ln_r=layernorm(f"{s}.ln_r", c),
                w1_l=conv(f"{s}.w1_l", c, c, 1),
                w1_r=conv(f"{s}.w1_r", c, c, 1),
                w2_l=conv(f"{s}.w2_l", c, c, 1),
                w2_r=conv(f"{s}.w2_r", c, c, 1),
                gamma_l=zeros_scale(f"{s}.gamma_l", c),
                gamma_r=zeros_scale(f"{s}.gamma_r", c))
    store.head = conv("head", c, 3 * cfg.scale * cfg.scale, 3)
    return store


def model_forward(store, lr_l, lr_r, train=False, rng=None, pool=GLOBAL_POOL,
                  drop_scales=None):
    """Super-resolve a stereo pair: (sr_l, sr_r) at scale x the input size.

    train mode draws one stochastic-depth decision per (block + attached
    fusion) unit per call; drop_scales overrides the draw (instrumentation).
    """
    cfg = store.config
    if lr_l.shape != lr_r.shape:
        raise ShapeError(f"view shapes differ: {lr_l.shape} vs {lr_r.shape}")
    if lr_l.shape[1] != 3:
        raise ShapeError(f"inputs must be RGB (3 channels), got {lr_l.shape[1]}")

    if drop_scales is not None:
        decisions = [StochasticDepthDecision(s) for s in drop_scales]
    elif train and cfg.drop_prob > 0.0:
        if rng is None:
            raise ConfigError("train-mode forward with drop_prob > 0 needs an rng")
        decisions = [StochasticDepthDecision.draw(rng, cfg.drop_prob)
                     for _ in range(cfg.n_blocks)]
    else:
        decisions = [StochasticDepthDecision.inference()] * cfg.n_blocks

    f_l = nn.conv2d(lr_l, store.intro)
    f_r = nn.conv2d(lr_r, store.intro)
    for i, block in enumerate(store.blocks):
        d = decisions[i]
        if d.scale == 0.0:
            continue  # the whole unit (block + its fusion) is dropped
        f_l = nafblock_forward(f_l, block, d, pool)
        f_r = nafblock_forward(f_r, block, d, pool)
        if i in store.scams:
            f_l, f_r = scam_forward(f_l, f_r, store.scams[i],
                                    residual_scale=d.scale)

    s = cfg.scale
    sr_l = ad.add(nn.bilinear_resize(lr_l, s),
                  nn.pixel_shuffle(nn.conv2d(f_l, store.head), s))
    sr_r = ad.add(nn.bilinear_resize(lr_r, s),
                  nn.pixel_shuffle(nn.conv2d(f_r, store.head), s))
    return sr_l, sr_r
