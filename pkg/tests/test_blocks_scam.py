"""Gated residual blocks and cross-view fusion: identity at init, drop
semantics, parameter-count closed forms, and the shared-matrix attention
against the naive two-pass oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from nafssr import autodiff as ad
from nafssr import layers as nn
from nafssr.blocks import (NafBlockParams, StochasticDepthDecision,
                           nafblock_forward, nafblock_param_count)
from nafssr.errors import ConfigError, ShapeError
from nafssr.model import ModelConfig, build_model
from nafssr.scam import ScamParams, scam_forward, scam_param_count
from nafssr.tlsc import GLOBAL_POOL


def t4(arr, grad=False):
    return ad.Tensor4(np.asarray(arr, np.float64), requires_grad=grad)


def build_block(rng, c, randomize=True):
    """One block with all tensors drawn (skip scales included, so the
    block is NOT the identity unless randomize=False)."""
    store = build_model(ModelConfig(width=c, n_blocks=1, scale=2,
                                    scam_count=0, dtype="float64"), seed=1)
    block = store.blocks[0]
    if randomize:
        for name, tensor in store.items():
            if "block0" in name:
                tensor.data[...] = rng.standard_normal(tensor.shape) * 0.2
    return block


def build_scam(rng, c, randomize=True):
    store = build_model(ModelConfig(width=c, n_blocks=1, scale=2,
                                    scam_count=1, dtype="float64"), seed=2)
    scam = store.scams[0]
    if randomize:
        for name, tensor in store.items():
            if "scam0" in name:
                tensor.data[...] = rng.standard_normal(tensor.shape) * 0.3
    return scam


def scam_oracle_params(scam, residual_scale=1.0):
    return {
        "ln_l_w": scam.ln_l.weight.data, "ln_l_b": scam.ln_l.bias.data,
        "ln_r_w": scam.ln_r.weight.data, "ln_r_b": scam.ln_r.bias.data,
        "w1_l_w": scam.w1_l.weight.data,
        "w1_l_b": scam.w1_l.bias.data[0, :, 0, 0],
        "w1_r_w": scam.w1_r.weight.data,
        "w1_r_b": scam.w1_r.bias.data[0, :, 0, 0],
        "w2_l_w": scam.w2_l.weight.data,
        "w2_l_b": scam.w2_l.bias.data[0, :, 0, 0],
        "w2_r_w": scam.w2_r.weight.data,
        "w2_r_b": scam.w2_r.bias.data[0, :, 0, 0],
        "gamma_l": scam.gamma_l.data, "gamma_r": scam.gamma_r.data,
        "eps": scam.ln_l.eps, "residual_scale": residual_scale,
    }


class TestStochasticDepth:
    def test_inference_keeps_everything(self):
        assert StochasticDepthDecision.inference().scale == 1.0

    def test_draw_zero_prob_consumes_no_randomness(self):
        r1 = np.random.default_rng(0)
        r2 = np.random.default_rng(0)
        for _ in range(5):
            assert StochasticDepthDecision.draw(r1, 0.0).scale == 1.0
        assert r1.bit_generator.state == r2.bit_generator.state

    def test_draw_statistics_and_scale(self):
        rng = np.random.default_rng(1)
        p = 0.3
        scales = [StochasticDepthDecision.draw(rng, p).scale
                  for _ in range(4000)]
        assert set(scales) == {0.0, 1.0 / (1.0 - p)}
        kept = sum(s > 0 for s in scales)
        assert 0.62 < kept / len(scales) < 0.78


class TestNafBlock:
    def test_param_count_formula_matches_store(self):
        for c in (8, 16, 48):
            store = build_model(ModelConfig(width=c, n_blocks=1, scale=2,
                                            scam_count=0), seed=0)
            block_total = sum(
                int(np.prod(t.shape)) for name, t in store.items()
                if name.startswith("block0."))
            assert block_total == nafblock_param_count(c) == 7 * c * c + 33 * c

    def test_identity_at_init(self):
        rng = np.random.default_rng(2)
        block = build_block(rng, 8, randomize=False)
        x = rng.standard_normal((2, 8, 5, 6))
        out = nafblock_forward(t4(x), block)
        np.testing.assert_array_equal(out.data, x)

    def test_dropped_unit_returns_input_object(self):
        rng = np.random.default_rng(3)
        block = build_block(rng, 8)
        x = t4(rng.standard_normal((1, 8, 4, 4)))
        out = nafblock_forward(x, block, StochasticDepthDecision(0.0))
        assert out is x

    def test_survival_scaling_is_per_branch(self):
        # kept unit at scale s must satisfy
        #   y1 = x + s*beta*branch1(x); out = y1 + s*gamma*branch2(y1)
        # which differs from scaling the whole block delta unless s == 1
        rng = np.random.default_rng(4)
        c = 8
        block = build_block(rng, c)
        x = rng.standard_normal((1, c, 4, 5))
        s = 1.0 / (1.0 - 0.25)

        plain = nafblock_forward(t4(x), block).data
        scaled = nafblock_forward(t4(x), block,
                                  StochasticDepthDecision(s)).data

        def branch1(inp):
            h = nn.layernorm2d(t4(inp), block.ln1)
            h = nn.conv2d(h, block.conv_expand)
            h = nn.conv2d(h, block.conv_dw)
            h = nn.simple_gate(h)
            h = nn.simplified_channel_attention(h, block.sca, GLOBAL_POOL)
            h = nn.conv2d(h, block.conv_proj)
            return h.data * block.beta.data

        def branch2(inp):
            h = nn.layernorm2d(t4(inp), block.ln2)
            h = nn.conv2d(h, block.ffn_expand)
            h = nn.simple_gate(h)
            h = nn.conv2d(h, block.ffn_proj)
            return h.data * block.gamma_ffn.data

        y1 = x + s * branch1(x)
        want = y1 + s * branch2(y1)
        np.testing.assert_allclose(scaled, want, atol=1e-11)
        assert not np.allclose(scaled, x + s * (plain - x), atol=1e-6)

    def test_width_mismatch_raises(self):
        block = build_block(np.random.default_rng(5), 8)
        with pytest.raises(ShapeError):
            nafblock_forward(t4(np.zeros((1, 4, 3, 3))), block)


class TestScam:
    def test_param_count_formula_matches_store(self):
        for c in (8, 16, 48):
            store = build_model(ModelConfig(width=c, n_blocks=1, scale=2,
                                            scam_count=1), seed=0)
            scam_total = sum(
                int(np.prod(t.shape)) for name, t in store.items()
                if name.startswith("scam0."))
            assert scam_total == scam_param_count(c) == 4 * c * c + 10 * c

    def test_identity_at_init(self):
        rng = np.random.default_rng(6)
        scam = build_scam(rng, 8, randomize=False)
        xl = rng.standard_normal((2, 8, 3, 7))
        xr = rng.standard_normal((2, 8, 3, 7))
        ol, orr = scam_forward(t4(xl), t4(xr), scam)
        np.testing.assert_array_equal(ol.data, xl)
        np.testing.assert_array_equal(orr.data, xr)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_two_pass_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 7))
        n = int(rng.integers(1, 3))
        h = int(rng.integers(1, 4))
        w = int(rng.integers(2, 7))
        scam = build_scam(rng, c)
        rs = float(rng.uniform(0.5, 1.5))
        xl = rng.standard_normal((n, c, h, w))
        xr = rng.standard_normal((n, c, h, w))
        ol, orr = scam_forward(t4(xl), t4(xr), scam, residual_scale=rs)
        wl, wr = oracles.scam_two_pass_naive(xl, xr,
                                             scam_oracle_params(scam, rs))
        np.testing.assert_allclose(ol.data, wl, atol=1e-5)
        np.testing.assert_allclose(orr.data, wr, atol=1e-5)

    def test_row_locality_exact(self):
        # changing one row of the right view must leave every other row of
        # the left output bitwise unchanged
        rng = np.random.default_rng(7)
        c, h, w = 4, 5, 6
        scam = build_scam(rng, c)
        xl = rng.standard_normal((1, c, h, w))
        xr = rng.standard_normal((1, c, h, w))
        base_l, base_r = scam_forward(t4(xl), t4(xr), scam)
        xr2 = xr.copy()
        xr2[0, :, 2, :] += rng.standard_normal((c, w))
        out_l, out_r = scam_forward(t4(xl), t4(xr2), scam)
        rows = np.arange(h) != 2
        assert (out_l.data[0, :, rows, :] == base_l.data[0, :, rows, :]).all()
        assert (out_r.data[0, :, rows, :] == base_r.data[0, :, rows, :]).all()
        assert not np.array_equal(out_l.data[0, :, 2, :],
                                  base_l.data[0, :, 2, :])

    def test_attention_rows_are_distributions(self):
        rng = np.random.default_rng(8)
        c, w = 4, 9
        q = rng.standard_normal((2, 3, w, c))
        k = rng.standard_normal((2, 3, c, w))
        a = ad.scale(ad.batched_row_matmul(t4(q), t4(k)), 1 / math.sqrt(c))
        for weights in (ad.softmax_lastdim(a),
                        ad.softmax_lastdim(ad.permute(a, (0, 1, 3, 2)))):
            assert (weights.data >= 0).all() and (weights.data <= 1).all()
            np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-12)

    def test_zero_gamma_passes_through_exactly(self):
        rng = np.random.default_rng(9)
        scam = build_scam(rng, 4)
        scam.gamma_l.data[...] = 0.0
        scam.gamma_r.data[...] = 0.0
        xl = rng.standard_normal((1, 4, 2, 5))
        xr = rng.standard_normal((1, 4, 2, 5))
        ol, orr = scam_forward(t4(xl), t4(xr), scam)
        np.testing.assert_array_equal(ol.data, xl)
        np.testing.assert_array_equal(orr.data, xr)

    def test_shape_checks(self):
        scam = build_scam(np.random.default_rng(10), 4)
        with pytest.raises(ShapeError):
            scam_forward(t4(np.zeros((1, 4, 2, 3))),
                         t4(np.zeros((1, 4, 2, 4))), scam)
        with pytest.raises(ShapeError):
            scam_forward(t4(np.zeros((1, 3, 2, 3))),
                         t4(np.zeros((1, 3, 2, 3))), scam)
