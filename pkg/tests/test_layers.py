"""Neural building blocks against loop oracles and hand values."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from nafssr import autodiff as ad
from nafssr import layers as nn
from nafssr.errors import ConfigError, ShapeError
from nafssr.tlsc import GLOBAL_POOL, PoolingPolicy


def t4(arr, grad=False):
    return ad.Tensor4(np.asarray(arr, np.float64), requires_grad=grad)


def conv_params(rng, cin, cout, k, groups=1):
    w = rng.standard_normal((cout, cin // groups, k, k))
    b = rng.standard_normal((1, cout, 1, 1))
    return nn.ConvParams(t4(w, grad=True), t4(b, grad=True), groups), w, b


class TestConvParams:
    def test_rejects_unsupported_kernel(self):
        rng = np.random.default_rng(0)
        w = t4(rng.standard_normal((4, 4, 5, 5)))
        b = t4(np.zeros((1, 4, 1, 1)))
        with pytest.raises(ConfigError):
            nn.ConvParams(w, b, 1)

    def test_rejects_grouped_1x1(self):
        w = t4(np.zeros((4, 2, 1, 1)))
        b = t4(np.zeros((1, 4, 1, 1)))
        with pytest.raises(ConfigError):
            nn.ConvParams(w, b, 2)

    def test_rejects_bad_bias_shape(self):
        w = t4(np.zeros((4, 4, 3, 3)))
        with pytest.raises(ShapeError):
            nn.ConvParams(w, t4(np.zeros((1, 3, 1, 1))), 1)

    def test_rejects_indivisible_groups(self):
        w = t4(np.zeros((4, 3, 3, 3)))
        b = t4(np.zeros((1, 4, 1, 1)))
        with pytest.raises(ConfigError):
            nn.ConvParams(w, b, 3)


class TestConv2d:
    @pytest.mark.parametrize("cin,cout,k,groups", [
        (3, 5, 1, 1),       # pointwise
        (4, 6, 3, 1),       # dense 3x3
        (4, 4, 3, 4),       # depthwise
        (6, 4, 3, 2),       # grouped
    ])
    def test_matches_loop_oracle(self, cin, cout, k, groups):
        rng = np.random.default_rng(cin * 100 + cout)
        p, w, b = conv_params(rng, cin, cout, k, groups)
        x = rng.standard_normal((2, cin, 5, 7))
        got = nn.conv2d(t4(x), p).data
        want = oracles.conv2d_naive(x, w, b[0, :, 0, 0], groups,
                                    pad=(k - 1) // 2)
        np.testing.assert_allclose(got, want, atol=1e-11)

    def test_3x3_keeps_spatial_size(self):
        rng = np.random.default_rng(1)
        p, _, _ = conv_params(rng, 3, 8, 3)
        assert nn.conv2d(t4(rng.standard_normal((1, 3, 6, 9))), p).shape \
            == (1, 8, 6, 9)

    def test_channel_mismatch_raises(self):
        rng = np.random.default_rng(2)
        p, _, _ = conv_params(rng, 4, 4, 3)
        with pytest.raises(ShapeError):
            nn.conv2d(t4(rng.standard_normal((1, 3, 5, 5))), p)

    @pytest.mark.parametrize("groups", [1, 4])
    def test_gradients_match_finite_differences(self, groups):
        rng = np.random.default_rng(3 + groups)
        p, _, _ = conv_params(rng, 4, 4, 3, groups)
        x = ad.Tensor4(rng.standard_normal((2, 4, 4, 5)), requires_grad=True)
        proj = t4(rng.standard_normal((2, 4, 4, 5)))

        def f(_=None):
            return ad.sum_all(ad.mul(nn.conv2d(x, p), proj))

        ad.backward(f())
        for tensor, label in ((x, "x"), (p.weight, "w"), (p.bias, "b")):
            fd = ad.finite_diff_grad(f, tensor, 1e-6)
            np.testing.assert_allclose(tensor.grad, fd, atol=1e-7,
                                       err_msg=label)


class TestLayerNorm:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        c = 6
        w = rng.standard_normal((1, c, 1, 1))
        b = rng.standard_normal((1, c, 1, 1))
        p = nn.LayerNormParams(t4(w, grad=True), t4(b, grad=True))
        x = rng.standard_normal((2, c, 3, 4))
        got = nn.layernorm2d(t4(x), p).data
        np.testing.assert_allclose(
            got, oracles.layernorm_naive(x, w, b, p.eps), atol=1e-11)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_unit_affine_standardizes_channels(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 9))
        p = nn.LayerNormParams(t4(np.ones((1, c, 1, 1))),
                               t4(np.zeros((1, c, 1, 1))))
        x = rng.standard_normal((1, c, 3, 3)) * rng.uniform(0.5, 20) \
            + rng.uniform(-5, 5)
        y = nn.layernorm2d(t4(x), p).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=1), 1.0, atol=1e-4)

    def test_pair_shape_check(self):
        with pytest.raises(ShapeError):
            nn.LayerNormParams(t4(np.ones((1, 4, 1, 1))),
                               t4(np.zeros((1, 5, 1, 1))))


class TestSimpleGate:
    def test_halves_channels_and_multiplies(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 6, 3, 4))
        y = nn.simple_gate(t4(x)).data
        np.testing.assert_allclose(y, x[:, :3] * x[:, 3:], atol=1e-12)

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            nn.simple_gate(t4(np.zeros((1, 5, 2, 2))))

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = ad.Tensor4(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
        proj = t4(rng.standard_normal((1, 2, 3, 3)))
        f = lambda _=None: ad.sum_all(ad.mul(nn.simple_gate(x), proj))
        ad.backward(f())
        np.testing.assert_allclose(x.grad, ad.finite_diff_grad(f, x, 1e-6),
                                   atol=1e-8)


class TestChannelAttention:
    @pytest.mark.parametrize("pool", [GLOBAL_POOL,
                                      PoolingPolicy("local", (2, 3))])
    def test_matches_manual_composition(self, pool):
        rng = np.random.default_rng(7)
        c = 4
        p, w, b = conv_params(rng, c, c, 1)
        x = rng.standard_normal((2, c, 5, 6))
        got = nn.simplified_channel_attention(t4(x), p, pool).data

        if pool.mode == "global":
            stat = np.broadcast_to(x.mean(axis=(2, 3), keepdims=True),
                                   x.shape)
        else:
            up, down = (pool.window[0] - 1) // 2, pool.window[0] // 2
            left, right = (pool.window[1] - 1) // 2, pool.window[1] // 2
            sums, cnt = oracles.box_sums_brute(x, up, down, left, right)
            stat = sums / cnt
        gate = oracles.conv2d_naive(stat, w, b[0, :, 0, 0])
        np.testing.assert_allclose(got, x * gate, atol=1e-10)

    @pytest.mark.parametrize("mode", ["global", "local"])
    def test_gradients(self, mode):
        pool = GLOBAL_POOL if mode == "global" else \
            PoolingPolicy("local", (3, 3))
        rng = np.random.default_rng(8)
        c = 3
        p, _, _ = conv_params(rng, c, c, 1)
        x = ad.Tensor4(rng.standard_normal((1, c, 4, 5)), requires_grad=True)
        proj = t4(rng.standard_normal((1, c, 4, 5)))

        def f(_=None):
            return ad.sum_all(ad.mul(
                nn.simplified_channel_attention(x, p, pool), proj))

        ad.backward(f())
        for tensor, label in ((x, "x"), (p.weight, "w"), (p.bias, "b")):
            fd = ad.finite_diff_grad(f, tensor, 1e-6)
            np.testing.assert_allclose(tensor.grad, fd, atol=1e-7,
                                       err_msg=label)


class TestPixelShuffle:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 12, 3, 4))
        got = nn.pixel_shuffle(t4(x), 2).data
        np.testing.assert_array_equal(got, oracles.pixel_shuffle_naive(x, 2))

    def test_hand_example(self):
        x = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
        got = nn.pixel_shuffle(t4(x), 2).data
        np.testing.assert_array_equal(got, [[[[0.0, 1.0], [2.0, 3.0]]]])

    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from([2, 4]))
    @settings(max_examples=20, deadline=None)
    def test_bijection(self, seed, s):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 3 * s * s, 2, 3))
        y = nn.pixel_shuffle(t4(x), s).data
        assert y.shape == (1, 3, 2 * s, 3 * s)
        assert sorted(y.ravel()) == sorted(x.ravel())

    def test_channel_divisibility_check(self):
        with pytest.raises(ShapeError):
            nn.pixel_shuffle(t4(np.zeros((1, 7, 2, 2))), 2)

    def test_adjoint_is_exact_inverse(self):
        rng = np.random.default_rng(10)
        x = ad.Tensor4(rng.standard_normal((1, 8, 2, 3)), requires_grad=True)
        g = rng.standard_normal((1, 2, 4, 6))
        ad.backward(ad.sum_all(ad.mul(nn.pixel_shuffle(x, 2), t4(g))))
        np.testing.assert_array_equal(
            nn.pixel_shuffle(t4(x.grad), 2).data, g)


class TestBilinearResize:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 4, 5))
        for s in (2, 4):
            got = nn.bilinear_resize(t4(x), s).data
            np.testing.assert_allclose(got, oracles.bilinear_up_naive(x, s),
                                       atol=1e-11)

    def test_hand_values_ramp(self):
        # 2x upsample of [0,1;2,3]: interior samples interpolate at
        # quarter points, border samples clamp to the edge value
        x = t4(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
        got = nn.bilinear_resize(x, 2).data[0, 0]
        want = np.array([[0.0, 0.25, 0.75, 1.0],
                         [0.5, 0.75, 1.25, 1.5],
                         [1.5, 1.75, 2.25, 2.5],
                         [2.0, 2.25, 2.75, 3.0]])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_constant_image_is_invariant(self):
        x = t4(np.full((1, 3, 5, 6), 0.37))
        np.testing.assert_allclose(nn.bilinear_resize(x, 4).data, 0.37,
                                   atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        x = ad.Tensor4(rng.standard_normal((1, 2, 3, 4)), requires_grad=True)
        proj = t4(rng.standard_normal((1, 2, 6, 8)))
        f = lambda _=None: ad.sum_all(ad.mul(nn.bilinear_resize(x, 2), proj))
        ad.backward(f())
        np.testing.assert_allclose(x.grad, ad.finite_diff_grad(f, x, 1e-6),
                                   atol=1e-8)
