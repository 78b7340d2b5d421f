import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from conftest import random_scene
from polarsplat import losses, metrics
from polarsplat.scene import Scene


def interior(shape, pad=5):
    m = np.zeros(shape, dtype=bool)
    m[pad:-pad, pad:-pad] = True
    return m


class TestL1:
    def test_examples(self):
        rng = np.random.default_rng(0)
        a = rng.random((16, 16))
        assert losses.loss_l1(a, a) == 0
        assert losses.loss_l1(a + 0.1, a) == pytest.approx(0.1)
        b = rng.random((16, 16))
        mask = rng.random((16, 16)) > 0.5
        ref = sum(abs(x - y) for x, y, k in zip(a.ravel(), b.ravel(), mask.ravel()) if k) / mask.sum()
        assert losses.loss_l1(a, b, mask) == pytest.approx(ref, rel=1e-12)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            losses.loss_l1(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))


class TestSSIM:
    def test_identical(self):
        a = np.random.default_rng(1).random((24, 24))
        assert losses.loss_ssim(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_negation_bounds(self):
        u, v = np.meshgrid(np.linspace(0, 6, 32), np.linspace(0, 6, 32))
        a = 0.5 + 0.4 * np.sin(u) * np.cos(v)
        val = losses.loss_ssim(a, 1.0 - a)
        assert 0 < val < 2

    def test_undersized(self):
        with pytest.raises(ValueError):
            losses.loss_ssim(np.zeros((10, 20)), np.zeros((10, 20)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(11, 40), st.integers(11, 40))
    def test_matches_skimage(self, seed, h, w):
        rng = np.random.default_rng(seed)
        x = rng.random((h, w))
        y = np.clip(x + rng.normal(0, 0.2, (h, w)), 0, 1)
        ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0)
        # skimage averages over the interior, where padding conventions do not matter
        assert metrics.ssim(x, y, interior((h, w))) == pytest.approx(ref, abs=1e-6)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((14, 13))
        y = rng.random((14, 13))
        mask = rng.random((14, 13)) > 0.3
        _, g = metrics.ssim_grad(x, y, mask)
        h = 1e-6
        for idx in [tuple(rng.integers(0, s) for s in x.shape) for _ in range(15)]:
            e = np.zeros_like(x)
            e[idx] = h
            fd = (metrics.ssim(x + e, y, mask) - metrics.ssim(x - e, y, mask)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestPSNR:
    def test_values(self):
        a = np.zeros((8, 8))
        assert metrics.psnr(a, a) == math.inf
        assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0)


class TestOpacity:
    def test_examples(self):
        gt = np.zeros((4, 4))
        gt[:2] = 0.9
        target = (gt > 0.2).astype(float)
        assert losses.loss_opacity(target, gt, 0.2) == 0
        assert losses.loss_opacity(np.zeros((4, 4)), gt, 0.2) == pytest.approx(0.5)

    @given(st.integers(0, 10_000), st.floats(0.05, 0.95))
    def test_direct(self, seed, tau):
        rng = np.random.default_rng(seed)
        io, gt = rng.random((6, 7)), rng.random((6, 7))
        ref = np.mean(np.abs(io - np.where(gt > tau, 1.0, 0.0)))
        assert losses.loss_opacity(io, gt, tau) == pytest.approx(ref, rel=1e-12)

    def test_tau_range(self):
        with pytest.raises(ValueError):
            losses.loss_opacity(np.zeros((2, 2)), np.zeros((2, 2)), 1.0)


class TestSize:
    def test_examples(self, small_intr):
        sc = random_scene(np.random.default_rng(0), 1, small_intr)
        sc.s_init = sc.scales.copy()
        assert losses.loss_size(sc) == 0
        sc.log_scales[0, 1] = np.log(sc.s_init[0, 1] + 0.2)
        assert losses.loss_size(sc) == pytest.approx(0.2 / 3)
        assert losses.loss_size(Scene()) == 0

    @given(st.integers(0, 10_000))
    def test_direct_and_grad(self, seed):
        from polarsplat.geometry import SonarIntrinsics
        rng = np.random.default_rng(seed)
        sc = random_scene(rng, 5, SonarIntrinsics.from_fov(60, 20, 4, 16, 16))
        sc.s_init = sc.scales * rng.choice([0.8, 1.25], (5, 3))
        ref = np.mean([max(0.0, a - b) for a, b in zip(sc.scales.ravel(), sc.s_init.ravel())])
        assert losses.loss_size(sc) == pytest.approx(ref, rel=1e-12)
        g = losses.loss_size_grad(sc)
        h = 1e-7
        for idx in np.ndindex(g.shape):
            sp, sm = sc.copy(), sc.copy()
            sp.log_scales[idx] += h
            sm.log_scales[idx] -= h
            assert g[idx] == pytest.approx((losses.loss_size(sp) - losses.loss_size(sm)) / (2 * h),
                                           rel=1e-5, abs=1e-10)


class TestTotal:
    def test_examples(self):
        assert losses.total_loss(losses.LossParts(), 0.8, 0.1, 1.0) == 0
        p = losses.LossParts(l1=0.3, ssim=0.7, opacity=0.2, size=0.1)
        assert losses.total_loss(p, 1.0, 0.0, 0.0) == pytest.approx(0.3)

    @given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
    def test_weighted_sum(self, parts, l1w, ow, sw):
        p = losses.LossParts(*parts)
        ref = l1w * parts[0] + (1 - l1w) * parts[1] + ow * parts[2] + sw * parts[3]
        assert losses.total_loss(p, l1w, ow, sw) == pytest.approx(ref, rel=1e-12, abs=1e-12)
