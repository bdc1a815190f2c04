"""Pooling statistics: window rule, edge-clipped means, adjoint, and the
local == global equivalence when the window covers the feature map."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from nafssr import autodiff as ad
from nafssr import tlsc
from nafssr.errors import ConfigError


class TestPoolingPolicy:
    def test_global_singleton(self):
        assert tlsc.GLOBAL_POOL.mode == "global"
        assert tlsc.GLOBAL_POOL.window is None

    def test_local_requires_window(self):
        with pytest.raises(ConfigError):
            tlsc.PoolingPolicy("local", None)

    def test_global_rejects_window(self):
        with pytest.raises(ConfigError):
            tlsc.PoolingPolicy("global", (3, 3))

    def test_rejects_unknown_mode(self):
        with pytest.raises(ConfigError):
            tlsc.PoolingPolicy("median", (3, 3))

    def test_rejects_nonpositive_window(self):
        with pytest.raises(ConfigError):
            tlsc.PoolingPolicy("local", (0, 3))


class TestWindowRule:
    def test_published_pairings(self):
        assert tlsc.tlsc_window_from_patch((30, 90)) == (45, 135)
        assert tlsc.tlsc_window_from_patch((40, 100)) == (60, 150)

    def test_half_rounds_up(self):
        # 1.5 * 3 = 4.5 must round to 5, not banker's 4
        assert tlsc.tlsc_window_from_patch((3, 3)) == (5, 5)

    def test_rejects_degenerate_patch(self):
        with pytest.raises(ConfigError):
            tlsc.tlsc_window_from_patch((0, 30))


class TestBoxMean:
    def test_hand_values_1d_window(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
        got = tlsc.box_mean(x, (1, 3))
        np.testing.assert_allclose(got[0, 0, 0], [1.5, 2.0, 3.0, 3.5])

    def test_hand_values_2x2_window_on_3x3(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        got = tlsc.box_mean(x, (2, 2))
        # window extends 0 up/left and 1 down/right, clipped at edges
        want = np.array([[2.0, 3.0, 3.5], [5.0, 6.0, 6.5], [6.5, 7.5, 8.0]])
        np.testing.assert_allclose(got[0, 0], want)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 7), st.integers(1, 7))
    @settings(max_examples=30, deadline=None)
    def test_matches_brute_force(self, seed, kh, kw):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = rng.standard_normal((2, 3, h, w))
        got = tlsc.box_mean(x, (kh, kw))
        up, down = (kh - 1) // 2, kh // 2
        left, right = (kw - 1) // 2, kw // 2
        sums, cnt = oracles.box_sums_brute(x, up, down, left, right)
        np.testing.assert_allclose(got, sums / cnt, atol=1e-10)

    def test_window_covering_image_equals_global_mean(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 6, 11))
        got = tlsc.box_mean(x, (99, 99))
        want = np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape)
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestLocalAvgPool:
    def test_forward_matches_box_mean(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 7))
        got = tlsc.local_avg_pool(ad.Tensor4(x), (3, 5)).data
        np.testing.assert_allclose(got, tlsc.box_mean(x, (3, 5)))

    @pytest.mark.parametrize("window", [(1, 1), (2, 3), (5, 5), (4, 9)])
    def test_gradient(self, window):
        rng = np.random.default_rng(hash(window) % 1000)
        x = ad.Tensor4(rng.standard_normal((1, 2, 4, 6)), requires_grad=True)
        proj = ad.Tensor4(rng.standard_normal((1, 2, 4, 6)))
        def f(_=None):
            return ad.sum_all(ad.mul(tlsc.local_avg_pool(x, window), proj))

        ad.backward(f())
        fd = ad.finite_diff_grad(f, x, 1e-6)
        np.testing.assert_allclose(x.grad, fd, atol=1e-8)

    def test_even_window_adjoint_reflects_offsets(self):
        # even windows are asymmetric; a wrong (unreflected) adjoint shows
        # up immediately against finite differences
        x = ad.Tensor4(np.arange(12.0).reshape(1, 1, 3, 4),
                       requires_grad=True)
        proj = ad.Tensor4(np.arange(12.0)[::-1].copy().reshape(1, 1, 3, 4))

        def f(_=None):
            return ad.sum_all(ad.mul(tlsc.local_avg_pool(x, (2, 2)), proj))

        ad.backward(f())
        fd = ad.finite_diff_grad(f, x, 1e-6)
        np.testing.assert_allclose(x.grad, fd, atol=1e-8)
