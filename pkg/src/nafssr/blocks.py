"""The trunk block: two normalized residual branches with no classic
activations: a gated depthwise-conv branch with channel attention, then a
gated channel-MLP branch, each entered through a zero-initialized
per-channel scale so a fresh block is the identity.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .errors import ShapeError
from .tlsc import GLOBAL_POOL


@dataclass(frozen=True)
class StochasticDepthDecision:
    """Per-unit drop decision: scale 0 (dropped), 1/(1-p) (kept, training),
    or 1 (inference / p=0)."""

    scale: float = 1.0

    @classmethod
    def inference(cls):
        return cls(1.0)

    @classmethod
    def draw(cls, rng, p):
        if p <= 0.0:
            return cls(1.0)
        if rng.random() < p:
            return cls(0.0)
        return cls(1.0 / (1.0 - p))


class NafBlockParams:
    """Parameters of one block at width c; see nafblock_param_count for the
    exact field inventory."""

    def __init__(self, ln1, conv_expand, conv_dw, sca, conv_proj,
                 ln2, ffn_expand, ffn_proj, beta, gamma_ffn):
        self.ln1 = ln1
        self.conv_expand = conv_expand
        self.conv_dw = conv_dw
        self.sca = sca
        self.conv_proj = conv_proj
        self.ln2 = ln2
        self.ffn_expand = ffn_expand
        self.ffn_proj = ffn_proj
        self.beta = beta
        self.gamma_ffn = gamma_ffn

    @property
    def width(self):
        return self.ln1.weight.shape[1]


def nafblock_forward(x, p, drop=StochasticDepthDecision.inference(),
                     pool=GLOBAL_POOL):
    """y1 = x + s·beta ⊙ ConvBranch(LN1(x)); out = y1 + s·gamma ⊙ FFN(LN2(y1)).

    ConvBranch = proj(SCA(gate(dwconv(expand(·))))); FFN = proj(gate(expand(·)));
    s is the stochastic-depth scale (0 returns x untouched).
    """
    if x.shape[1] != p.width:
        raise ShapeError(f"nafblock: input width {x.shape[1]} != block width "
                         f"{p.width}")
    s = drop.scale
    if s == 0.0:
        return x

    t = nn.layernorm2d(x, p.ln1)
    t = nn.conv2d(t, p.conv_expand)
    t = nn.conv2d(t, p.conv_dw)
    t = nn.simple_gate(t)
    t = nn.simplified_channel_attention(t, p.sca, pool)
    t = nn.conv2d(t, p.conv_proj)
    t = ad.mul(t, p.beta)
    if s != 1.0:
        t = ad.scale(t, s)
    y1 = ad.add(x, t)

    t = nn.layernorm2d(y1, p.ln2)
    t = nn.conv2d(t, p.ffn_expand)
    t = nn.simple_gate(t)
    t = nn.conv2d(t, p.ffn_proj)
    t = ad.mul(t, p.gamma_ffn)
    if s != 1.0:
        t = ad.scale(t, s)
    return ad.add(y1, t)


def nafblock_param_count(c):
    """Exact trainable-scalar count of one block of width c: 7c² + 33c."""
    ln = 2 * (2 * c)                    # two layer norms, weight+bias each
    expand = 2 * c * c + 2 * c          # 1x1 c->2c
    dw = 2 * c * 9 + 2 * c              # depthwise 3x3 on 2c
    sca = c * c + c                     # 1x1 c->c gate
    proj = c * c + c                    # 1x1 c->c
    ffn = (2 * c * c + 2 * c) + (c * c + c)  # 1x1 c->2c then c->c
    scales = 2 * c                      # beta, gamma_ffn
    return ln + expand + dw + sca + proj + ffn + scales
