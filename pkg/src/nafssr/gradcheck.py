"""Finite-difference verification of every differentiable primitive and of
the end-to-end micro model, shared by the test suite and the gradcheck CLI
command.

Each check builds a small seeded configuration, evaluates a scalar made
non-degenerate by a fixed random projection, computes analytic gradients
with one backward pass, and compares against central differences per
parameter tensor.  The comparison is max|ad - fd| normalized by the larger
of the two gradients' max magnitudes.

The difference quotient is always evaluated on the float64 twin of the
seeded configuration: a pure float32 quotient carries forward-rounding
noise of order 1e-2 relative through composite graphs, far above the
certification threshold, while float32 analytic gradients themselves sit
within ~1e-6 of the float64 truth.  The 32-bit check therefore certifies
the 32-bit backward pass against an oracle that is actually accurate
enough to judge it.
"""

import zlib
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .blocks import NafBlockParams, nafblock_forward
from .errors import ConfigError
from .model import ModelConfig, build_model, model_forward
from .scam import ScamParams, scam_forward
from .tlsc import PoolingPolicy, local_avg_pool

TOLERANCE = {32: 1e-3, 64: 1e-5}
ORACLE_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    precision: int
    worst: float
    per_tensor: Dict[str, float]
    tolerance: float

    @property
    def passed(self):
        return self.worst < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<28} worst rel err "
                f"{self.worst:.3e} (tol {self.tolerance:.0e}, "
                f"{self.precision}-bit)")


def relative_error(g, fd):
    scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-6)
    return float(np.abs(g - fd).max() / scale)


def _run(name, precision, f, tensors, f_oracle, tensors_oracle):
    ad.backward(f())
    per = {}
    for label, t in tensors.items():
        t_o = tensors_oracle[label]
        fd = ad.finite_diff_grad(lambda _x: f_oracle(), t_o, ORACLE_EPS)
        g = np.zeros(t.shape) if t.grad is None else t.grad
        per[label] = relative_error(np.asarray(g, dtype=np.float64), fd)
        t.grad = None
    worst = max(per.values())
    return CheckResult(name, precision, worst, per, TOLERANCE[precision])


def _rng(name):
    # crc32 rather than hash(): stable across processes (hash is salted).
    return np.random.default_rng(zlib.crc32(name.encode()))


def _t(rng, shape, dtype, scale=1.0, grad=True):
    return ad.Tensor4((rng.standard_normal(shape) * scale).astype(dtype),
                      requires_grad=grad)


def _proj(rng, shape, dtype):
    """Fixed random projection making sum-based scalars sensitive to every
    output element with O(1) distinct weights."""
    return ad.Tensor4((rng.uniform(0.5, 1.5, shape)
                       * rng.choice([-1.0, 1.0], shape)).astype(dtype))


def _conv(rng, cin, cout, k, dtype, groups=1):
    fan = (cin // groups) * k * k
    w = _t(rng, (cout, cin // groups, k, k), dtype, scale=fan ** -0.5)
    b = _t(rng, (1, cout, 1, 1), dtype, scale=0.1)
    return nn.ConvParams(w, b, groups)


def _ln(rng, c, dtype):
    w = ad.Tensor4((1.0 + 0.2 * rng.standard_normal((1, c, 1, 1)))
                   .astype(dtype), requires_grad=True)
    b = _t(rng, (1, c, 1, 1), dtype, scale=0.1)
    return nn.LayerNormParams(w, b)


def _check_conv(name, k, groups):
    def build(dtype):
        rng = _rng(name)
        cin, cout = (6, 6) if groups > 1 else (3, 5)
        g = cin if groups > 1 else 1
        x = _t(rng, (2, cin, 5, 7), dtype)
        p = _conv(rng, cin, cout, k, dtype, g)
        fix = _proj(rng, (2, cout, 5, 7), dtype)
        f = lambda: ad.sum_all(ad.mul(nn.conv2d(x, p), fix))
        return f, {"x": x, "weight": p.weight, "bias": p.bias}
    return build


def _check_layernorm(dtype):
    rng = _rng("layernorm2d")
    x = _t(rng, (2, 6, 4, 5), dtype)
    p = _ln(rng, 6, dtype)
    fix = _proj(rng, (2, 6, 4, 5), dtype)
    f = lambda: ad.sum_all(ad.mul(nn.layernorm2d(x, p), fix))
    return f, {"x": x, "weight": p.weight, "bias": p.bias}


def _check_simple_gate(dtype):
    rng = _rng("simple_gate")
    x = _t(rng, (1, 8, 3, 4), dtype)
    fix = _proj(rng, (1, 4, 3, 4), dtype)
    f = lambda: ad.sum_all(ad.mul(nn.simple_gate(x), fix))
    return f, {"x": x}


def _check_sca(mode):
    def build(dtype):
        rng = _rng(f"sca-{mode}")
        pol = PoolingPolicy() if mode == "global" else \
            PoolingPolicy("local", (3, 2))
        x = _t(rng, (2, 4, 5, 6), dtype)
        p = _conv(rng, 4, 4, 1, dtype)
        fix = _proj(rng, (2, 4, 5, 6), dtype)
        f = lambda: ad.sum_all(ad.mul(
            nn.simplified_channel_attention(x, p, pol), fix))
        return f, {"x": x, "weight": p.weight, "bias": p.bias}
    return build


def _check_pixel_shuffle(dtype):
    rng = _rng("pixel_shuffle")
    x = _t(rng, (1, 12, 3, 4), dtype)
    fix = _proj(rng, (1, 3, 6, 8), dtype)
    f = lambda: ad.sum_all(ad.mul(nn.pixel_shuffle(x, 2), fix))
    return f, {"x": x}


def _check_bilinear(dtype):
    rng = _rng("bilinear_resize")
    x = _t(rng, (1, 3, 4, 5), dtype)
    fix = _proj(rng, (1, 3, 8, 10), dtype)
    f = lambda: ad.sum_all(ad.mul(nn.bilinear_resize(x, 2), fix))
    return f, {"x": x}


def _check_local_pool(dtype):
    rng = _rng("local_avg_pool")
    x = _t(rng, (1, 2, 6, 7), dtype)
    fix = _proj(rng, (1, 2, 6, 7), dtype)
    f = lambda: ad.sum_all(ad.mul(local_avg_pool(x, (4, 3)), fix))
    return f, {"x": x}


def _check_softmax(dtype):
    rng = _rng("softmax_lastdim")
    x = _t(rng, (2, 3, 4, 5), dtype)
    fix = _proj(rng, (2, 3, 4, 5), dtype)
    f = lambda: ad.sum_all(ad.mul(ad.softmax_lastdim(x), fix))
    return f, {"x": x}


def _check_matmul(dtype):
    rng = _rng("batched_row_matmul")
    a = _t(rng, (2, 3, 4, 2), dtype)
    b = _t(rng, (2, 3, 2, 5), dtype)
    fix = _proj(rng, (2, 3, 4, 5), dtype)
    f = lambda: ad.sum_all(ad.mul(ad.batched_row_matmul(a, b), fix))
    return f, {"a": a, "b": b}


def _scam_params(rng, c, dtype):
    return ScamParams(
        ln_l=_ln(rng, c, dtype), ln_r=_ln(rng, c, dtype),
        w1_l=_conv(rng, c, c, 1, dtype), w1_r=_conv(rng, c, c, 1, dtype),
        w2_l=_conv(rng, c, c, 1, dtype), w2_r=_conv(rng, c, c, 1, dtype),
        gamma_l=_t(rng, (1, c, 1, 1), dtype, 0.3),
        gamma_r=_t(rng, (1, c, 1, 1), dtype, 0.3))


def _check_scam(dtype):
    rng = _rng("scam")
    c = 2
    p = _scam_params(rng, c, dtype)
    xl = _t(rng, (1, c, 2, 3), dtype)
    xr = _t(rng, (1, c, 2, 3), dtype)
    fl = _proj(rng, (1, c, 2, 3), dtype)
    fr = _proj(rng, (1, c, 2, 3), dtype)

    def f():
        ol, orr = scam_forward(xl, xr, p)
        return ad.add(ad.sum_all(ad.mul(ol, fl)), ad.sum_all(ad.mul(orr, fr)))

    tensors = {"x_l": xl, "x_r": xr,
               "ln_l.weight": p.ln_l.weight, "ln_l.bias": p.ln_l.bias,
               "ln_r.weight": p.ln_r.weight, "ln_r.bias": p.ln_r.bias,
               "w1_l.weight": p.w1_l.weight, "w1_l.bias": p.w1_l.bias,
               "w1_r.weight": p.w1_r.weight, "w1_r.bias": p.w1_r.bias,
               "w2_l.weight": p.w2_l.weight, "w2_l.bias": p.w2_l.bias,
               "w2_r.weight": p.w2_r.weight, "w2_r.bias": p.w2_r.bias,
               "gamma_l": p.gamma_l, "gamma_r": p.gamma_r}
    return f, tensors


def _check_nafblock(dtype):
    rng = _rng("nafblock")
    c = 4
    p = NafBlockParams(
        ln1=_ln(rng, c, dtype),
        conv_expand=_conv(rng, c, 2 * c, 1, dtype),
        conv_dw=_conv(rng, 2 * c, 2 * c, 3, dtype, groups=2 * c),
        sca=_conv(rng, c, c, 1, dtype),
        conv_proj=_conv(rng, c, c, 1, dtype),
        ln2=_ln(rng, c, dtype),
        ffn_expand=_conv(rng, c, 2 * c, 1, dtype),
        ffn_proj=_conv(rng, c, c, 1, dtype),
        beta=_t(rng, (1, c, 1, 1), dtype, 0.3),
        gamma_ffn=_t(rng, (1, c, 1, 1), dtype, 0.3))
    x = _t(rng, (1, c, 4, 6), dtype)
    fix = _proj(rng, (1, c, 4, 6), dtype)
    f = lambda: ad.sum_all(ad.mul(nafblock_forward(x, p), fix))
    tensors = {"x": x, "beta": p.beta, "gamma_ffn": p.gamma_ffn}
    for mod in ("ln1", "conv_expand", "conv_dw", "sca", "conv_proj",
                "ln2", "ffn_expand", "ffn_proj"):
        obj = getattr(p, mod)
        tensors[f"{mod}.weight"] = obj.weight
        tensors[f"{mod}.bias"] = obj.bias
    return f, tensors


def _check_model_micro(dtype):
    rng = _rng("model_micro")
    name = "float32" if dtype == np.float32 else "float64"
    cfg = ModelConfig(width=8, n_blocks=2, scale=2, scam_count=2, dtype=name)
    store = build_model(cfg, seed=11)
    # skip-init scales start at zero, which would hide most gradients;
    # randomize every parameter so the check exercises real signal paths
    for pname in store.names():
        t = store[pname]
        if pname.endswith(("beta", "gamma_ffn", "gamma_l", "gamma_r")):
            t.data[...] = (0.3 * rng.standard_normal(t.shape)).astype(dtype)
        elif pname.endswith("bias"):
            t.data[...] = (0.05 * rng.standard_normal(t.shape)).astype(dtype)
    lr_l = ad.Tensor4(rng.random((1, 3, 8, 24)).astype(dtype))
    lr_r = ad.Tensor4(rng.random((1, 3, 8, 24)).astype(dtype))

    def f():
        sl, sr = model_forward(store, lr_l, lr_r)
        return ad.add(ad.sum_all(sl), ad.sum_all(sr))

    return f, dict(store.items())


CHECKS = {
    "conv1x1": _check_conv("conv1x1", 1, 1),
    "conv3x3": _check_conv("conv3x3", 3, 1),
    "conv3x3_depthwise": _check_conv("conv3x3_depthwise", 3, 6),
    "layernorm2d": _check_layernorm,
    "simple_gate": _check_simple_gate,
    "channel_attention_global": _check_sca("global"),
    "channel_attention_local": _check_sca("local"),
    "pixel_shuffle": _check_pixel_shuffle,
    "bilinear_resize": _check_bilinear,
    "local_avg_pool": _check_local_pool,
    "softmax_lastdim": _check_softmax,
    "batched_row_matmul": _check_matmul,
    "scam": _check_scam,
    "nafblock": _check_nafblock,
    "model_micro": _check_model_micro,
}


def run_check(name, precision=32):
    if name not in CHECKS:
        raise ConfigError(f"unknown gradcheck {name!r}; options: "
                          f"{', '.join(CHECKS)}")
    if precision not in TOLERANCE:
        raise ConfigError(f"precision must be 32 or 64, got {precision}")
    dtype = np.float32 if precision == 32 else np.float64
    f, tensors = CHECKS[name](dtype)
    if precision == 64:
        f_o, tensors_o = f, tensors
    else:
        # float64 twin of the same seeded configuration as the FD oracle
        f_o, tensors_o = CHECKS[name](np.float64)
    return _run(name, precision, f, tensors, f_o, tensors_o)


def run_suite(precision=32, names=None):
    return [run_check(n, precision) for n in (names or list(CHECKS))]
