import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient_check, fd_scene, random_scene, single_gaussian
from polarsplat.data import oracle_render_gaussians
from polarsplat.geometry import Pose, SonarIntrinsics, spherical_to_cartesian
from polarsplat.optim import TrainConfig
from polarsplat.rasterizer import (
    ALPHA_MAX, compute_transmittance, cull, elevation_plane_footprints, full_transmittance,
    rasterize_backward, render, render_dense, window, window_grad,
)
from polarsplat.scene import SH_C0, Scene, logit, sh_encode_constant


def numeric_sph_sd(p, cov, h=1e-6):
    """Spherical standard deviations from a numerical Jacobian."""
    def sph(x):
        return np.array([np.linalg.norm(x), np.arctan2(x[1], x[0]),
                         np.arctan2(x[2], np.hypot(x[0], x[1]))])
    J = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        J[:, k] = (sph(p + e) - sph(p - e)) / (2 * h)
    return sph(p), np.sqrt(np.diag(J @ cov @ J.T))


class TestWindow:
    def test_shape(self):
        m = np.linspace(0, 12, 4001)
        f = window(m)
        assert window(0.0) == 1.0
        assert (np.diff(f) <= 0).all()
        assert (f[m >= 9] == 0).all()
        assert np.abs(f - np.exp(-m / 2) * (m < 9)).max() <= 2 * np.exp(-5) + 1e-12

    def test_grad(self):
        m = np.linspace(0.01, 8.99, 300)
        h = 1e-6
        assert np.allclose((window(m + h) - window(m - h)) / (2 * h), window_grad(m), atol=1e-8)
        assert abs(window_grad(9 - 1e-9)) < 1e-8


class TestCull:
    def test_behind_sensor(self, small_intr):
        sc = single_gaussian([-2.0, 0.1, 0.0])
        assert len(cull(sc, Pose.identity(), small_intr)) == 0

    def test_center_retained(self, small_intr):
        sc = single_gaussian([2.0, 0.0, 0.0])
        assert len(cull(sc, Pose.identity(), small_intr)) == 1

    def test_brute_force(self, small_intr):
        rng = np.random.default_rng(0)
        n = 1000
        pose = Pose(rng.normal(size=4), rng.normal(0, 0.3, 3))
        sc = random_scene(rng, n, small_intr, scale=(0.02, 0.6))
        sc.means = pose.to_world(rng.uniform([-1, -3, -1.5], [5.5, 3, 1.5], (n, 3)))
        proj = cull(sc, pose, small_intr)
        covs = sc.covariances()
        R = pose.R
        expected = []
        for k in range(n):
            pc = pose.to_sensor(sc.means[k])
            (r, th, ph), sd = numeric_sph_sd(pc, R.T @ covs[k] @ R)
            i = small_intr
            if (r - 3 * sd[0] <= i.r_max and th + 3 * sd[1] >= i.theta_min and th - 3 * sd[1] <= i.theta_max
                    and ph + 3 * sd[2] >= i.phi_min and ph - 3 * sd[2] <= i.phi_max):
                expected.append(k)
        assert 50 < len(expected) < n
        assert list(proj.idx) == expected


class TestTransmittance:
    def test_single(self, small_intr):
        tm = compute_transmittance(cull(single_gaussian([2.0, 0, 0]), Pose.identity(), small_intr), small_intr)
        assert tm.tbar.tolist() == [1.0]

    def _pair(self, o_front=1 - 1e-12):
        front = single_gaussian([1.5, 0, 0], sigma=0.05, opacity=o_front)
        rear = single_gaussian([2.5, 0, 0], sigma=0.05 * 2.5 / 1.5, opacity=0.5)
        return front.append(rear)

    def test_opaque_front_closed_form(self, small_intr):
        # both footprints coincide on the elevation/azimuth plane
        proj = cull(self._pair(), Pose.identity(), small_intr)
        tm = compute_transmittance(proj, small_intr)
        mean, cov = elevation_plane_footprints(proj, small_intr)
        assert np.allclose(mean[0], mean[1]) and np.allclose(cov[0], cov[1], rtol=1e-6)
        ne, na = small_intr.n_elevation, small_intr.n_azimuth
        e, a = np.meshgrid(np.arange(ne) + 0.5, np.arange(na) + 0.5, indexing="ij")
        d = np.stack([e - mean[1, 0], a - mean[1, 1]], -1)
        m = np.einsum("...i,ij,...j->...", d, np.linalg.inv(cov[1]), d)
        inside = m < 9
        expected = np.mean(1 - np.minimum(window(m[inside]), ALPHA_MAX))
        assert tm.tbar[0] == 1.0
        assert tm.tbar[1] == pytest.approx(expected, rel=1e-9)
        # plane transmittance after both Gaussians
        w = np.where(m < 9, window(m), 0.0)
        plane = (1 - np.minimum(w, ALPHA_MAX)) * (1 - np.minimum(0.5 * w, ALPHA_MAX))
        assert np.allclose(tm.plane, plane, rtol=1e-9)

    @pytest.mark.xfail(strict=True, reason="footprint-mean transmittance of a rear Gaussian "
                       "behind one equal-size opaque Gaussian is ~0.78, not < 0.05")
    def test_opaque_front_rear_below_005(self, small_intr):
        tm = compute_transmittance(cull(self._pair(), Pose.identity(), small_intr), small_intr)
        assert tm.tbar[1] < 0.05

    def test_opaque_wall(self, small_intr):
        i = small_intr
        th = np.linspace(i.theta_min - 0.05, i.theta_max + 0.05, 60)
        ph = np.linspace(i.phi_min - 0.05, i.phi_max + 0.05, 30)
        T, P = np.meshgrid(th, ph)
        pts = np.stack([spherical_to_cartesian((1.0, a, b)) for a, b in zip(T.ravel(), P.ravel())])
        n = len(pts)
        wall = Scene(means=pts, log_scales=np.log(np.full((n, 3), 0.02)),
                     quats=np.tile([1.0, 0, 0, 0], (n, 1)), opacity_logits=np.full(n, 30.0),
                     sh=sh_encode_constant(np.full(n, 0.5)), streak_logits=np.full(n, -5.0),
                     s_init=np.full((n, 3), 0.02))
        rng = np.random.default_rng(0)
        probes = random_scene(rng, 20, i, r=(2.0, 2.0), scale=(0.05, 0.1))
        sc = wall.append(probes)
        proj = cull(sc, Pose.identity(), i)
        tm = compute_transmittance(proj, i)
        probe = proj.idx >= n
        assert probe.sum() == 20
        assert (tm.tbar[probe] < 0.01).all()

    def test_front_beats_rear(self, small_intr):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.uniform(-0.3, 0.3)
            b = rng.uniform(-0.1, 0.1)
            sc = single_gaussian(spherical_to_cartesian((1.5, a, b)), opacity=rng.uniform(0.2, 0.9)).append(
                single_gaussian(spherical_to_cartesian((3.0, a, b)), sigma=0.1, opacity=rng.uniform(0.2, 0.9)))
            tm = compute_transmittance(cull(sc, Pose.identity(), small_intr), small_intr)
            assert tm.tbar[0] >= tm.tbar[1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_occlusion(self, seed):
        intr = SonarIntrinsics.from_fov(60, 20, 4.0, 32, 32)
        rng = np.random.default_rng(seed)
        sc = random_scene(rng, 12, intr, scale=(0.05, 0.2))
        base = compute_transmittance(cull(sc, Pose.identity(), intr), intr).tbar
        k = int(rng.integers(12))
        up = sc.copy()
        up.opacity_logits[k] += rng.uniform(0.1, 3.0)
        after = compute_transmittance(cull(up, Pose.identity(), intr), intr).tbar
        others = np.arange(12) != k
        assert (after[others] <= base[others] + 1e-12).all()
        assert ((base >= 0) & (base <= 1)).all()


class TestForward:
    def test_empty(self, small_intr):
        b = render(Scene(), Pose.identity(), small_intr)
        for img in (b.I_u, b.P_a, b.Io, b.Ihat):
            assert img.shape == small_intr.shape and not img.any()

    def test_unit_peak(self, small_intr):
        r_c, th_c = small_intr.pixel_centers()
        mu = spherical_to_cartesian((r_c[12], th_c[9], 0.0))
        sc = single_gaussian(mu, sigma=0.03, nu=1.0)
        sc.opacity_logits[:] = 50.0
        b = render(sc, Pose.identity(), small_intr, transmittance=[1.0], apply_gain=False)
        assert b.I_u[12, 9] == pytest.approx(1.0, abs=1e-12)

    def test_tiled_matches_dense(self, small_intr):
        rng = np.random.default_rng(11)
        sc = random_scene(rng, 50, small_intr)
        b = render(sc, Pose.identity(), small_intr)
        I, P, O = render_dense(sc, Pose.identity(), small_intr, full_transmittance(b))
        assert np.abs(b.I_u - I).mean() < 1e-5
        assert np.abs(b.P_a - np.clip(P, 0, 1)).max() < 1e-12
        assert np.abs(b.Io - np.clip(O, 0, 1)).max() < 1e-12

    def test_truncation_bound(self, small_intr):
        rng = np.random.default_rng(12)
        sc = random_scene(rng, 30, small_intr)
        b = render(sc, Pose.identity(), small_intr)
        full, _, _ = render_dense(sc, Pose.identity(), small_intr, full_transmittance(b), truncate=False)
        # each Gaussian deviates by at most 2 exp(-5) per pixel, scaled by its weight
        bound = 2 * np.exp(-5) * np.sum(b.weight * b.proj.nu)
        assert np.abs(b.I_u - full).max() <= bound

    def test_range_attenuation(self, small_intr):
        sc = single_gaussian([2.0, 0.0, 0.0])
        a = render(sc, Pose.identity(), small_intr, apply_gain=False)
        b = render(sc, Pose.identity(), small_intr, apply_gain=False, use_range_attenuation=True)
        assert np.allclose(b.I_u, a.I_u / 2.0)

    def test_ranges(self, small_intr):
        sc = random_scene(np.random.default_rng(2), 80, small_intr, opacity=(0.8, 0.99))
        sc.streak_logits[:] = 3.0
        b = render(sc, Pose.identity(), small_intr)
        assert b.P_a.max() <= 1 and b.P_a.min() >= 0 and b.Io.max() <= 1 and b.Io.min() >= 0
        assert b.P_raw.max() > 1  # the clamp is exercised

    def test_linearity(self, small_intr):
        rng = np.random.default_rng(5)
        a = random_scene(rng, 10, small_intr)
        b = random_scene(rng, 10, small_intr)
        one = lambda s: render(s, Pose.identity(), small_intr, transmittance=np.ones(len(s)), apply_gain=False).I_u
        assert np.allclose(one(a.append(b)), one(a) + one(b), atol=1e-12)

    def test_scaling(self, small_intr):
        rng = np.random.default_rng(6)
        sc = random_scene(rng, 10, small_intr, sh_degree_high=False)
        t = np.full(10, 0.7)
        base = render(sc, Pose.identity(), small_intr, transmittance=t, apply_gain=False).I_u
        sc.sh *= 2.5
        assert np.allclose(render(sc, Pose.identity(), small_intr, transmittance=t, apply_gain=False).I_u,
                           2.5 * base, rtol=1e-12, atol=0)

    def test_determinism_and_tile_schedule(self, small_intr):
        sc = random_scene(np.random.default_rng(7), 40, small_intr)
        a = render(sc, Pose.identity(), small_intr)
        b = render(sc, Pose.identity(), small_intr)
        assert np.array_equal(a.Ihat, b.Ihat)
        for tile in (4, 8, 32):
            c = render(sc, Pose.identity(), small_intr, tile=tile)
            assert np.abs(c.Ihat - a.Ihat).max() <= 1e-6

    def test_matches_quadrature_oracle(self):
        intr = SonarIntrinsics.from_fov(60, 20, 4.0, 32, 32)
        rng = np.random.default_rng(8)
        n = 6
        r = rng.uniform(1.5, 3.5, n)
        th = rng.uniform(-0.35, 0.35, n)
        ph = rng.uniform(-0.1, 0.1, n)
        pts = np.stack([spherical_to_cartesian(s) for s in zip(r, th, ph)])
        sc = Scene(means=pts, log_scales=np.log(np.full((n, 3), 0.3 * intr.eps_r)),
                   quats=np.tile([1.0, 0, 0, 0], (n, 1)), opacity_logits=logit(rng.uniform(0.3, 0.8, n)),
                   sh=sh_encode_constant(rng.uniform(0.3, 1.0, n)), streak_logits=np.full(n, -5.0),
                   s_init=np.full((n, 3), 0.3 * intr.eps_r))
        ras = render(sc, Pose.identity(), intr, apply_gain=False).I_u
        ora = oracle_render_gaussians(sc, Pose.identity(), intr, quadrature=8)
        assert np.abs(ras - ora).mean() < 5e-3


class TestBackward:
    def test_reflectance_gradient(self, small_intr):
        sc = single_gaussian([2.0, 0.05, 0.02], sigma=0.08, opacity=0.6)
        b = render(sc, Pose.identity(), small_intr, transmittance=[0.7], apply_gain=False)
        i, j = np.unravel_index(np.argmax(b.I_u), b.I_u.shape)
        g = np.zeros(small_intr.shape)
        g[i, j] = 1.0
        grads = rasterize_backward(b, sc, np.zeros_like(g), None, g)
        pix = np.nonzero((b.pairs.pix == i * small_intr.n_azimuth + j))[0]
        f = b.f[pix].sum()
        assert grads.sh[0, 0] == pytest.approx(0.6 * 0.7 * f * SH_C0, rel=1e-12)

    def test_zero_upstream(self, small_intr):
        sc = random_scene(np.random.default_rng(1), 8, small_intr)
        b = render(sc, Pose.identity(), small_intr)
        z = np.zeros(small_intr.shape)
        grads = rasterize_backward(b, sc, z, z, z)
        assert all(not np.any(v) for _, v in grads.items())

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, small_intr, seed):
        rng = np.random.default_rng(seed)
        pose = Pose(np.array([1.0, 0, 0, 0]) + rng.normal(0, 0.05, 4), rng.normal(0, 0.1, 3))
        n, fails = fd_gradient_check(fd_scene(rng, small_intr), pose, small_intr, TrainConfig(), rng)
        assert n > 0 and fails == []

    def test_finite_differences_with_attenuation(self, small_intr):
        rng = np.random.default_rng(99)
        cfg = TrainConfig(use_range_attenuation=True)
        n, fails = fd_gradient_check(fd_scene(rng, small_intr, 4), Pose.identity(), small_intr, cfg, rng)
        assert fails == []


@pytest.mark.parametrize("px", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("r, th", [(2.0, 0.0), (3.0, 0.2), (1.5, -0.3)])
def test_mass_against_quadrature(px, r, th):
    """Total intensity relative to the quadrature reference, term by term.

    The rasterizer dilates the footprint by the 0.3 px^2 blur and truncates it
    at three sigma; the reference integrates the exact Cartesian Gaussian over
    angle, whose angular width shrinks as 1/r, weighting it by (r_c / r)^2.
    """
    from scipy.integrate import quad

    from polarsplat.geometry import rotmat_to_quat
    intr = SonarIntrinsics.from_fov(60, 20, 4.0, 32, 32)
    p = spherical_to_cartesian((r, th, 0.0))
    u = p / r
    t = np.array([-np.sin(th), np.cos(th), 0.0])
    s = np.array([[px * intr.eps_r, px * intr.eps_a * r, 0.02]])
    sc = Scene(means=[p], log_scales=np.log(s), quats=[rotmat_to_quat(np.column_stack([u, t, np.cross(u, t)]))],
               opacity_logits=[logit(0.02)], sh=[sh_encode_constant(1.0)], streak_logits=[-8.0], s_init=s)
    ras = render(sc, Pose.identity(), intr, apply_gain=False).I_u.sum()
    ora = oracle_render_gaussians(sc, Pose.identity(), intr, quadrature=8).sum()
    kept = quad(lambda rho: float(window(rho ** 2)) * rho, 0, 3)[0]
    predicted = (px ** 2 + 0.3) / px ** 2 * kept / (1 + 3 * (s[0, 0] / r) ** 2)
    assert ras / ora == pytest.approx(predicted, rel=0.02)
