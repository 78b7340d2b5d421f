"""Differentiable range/azimuth rasterizer.

Forward pipeline for one view::

    world -> sensor frame -> (r, theta, phi) with linearized covariance
          -> range/azimuth pixel space (means + 2x2 covariances)
          -> average transmittance from an azimuth/elevation splat (stop-gradient)
          -> tiled accumulation of reflectance, streak probability and opacity
          -> adaptive gain

Every Gaussian's footprint is truncated at its 3-sigma ellipse with a
continuous window: ``(exp(-m/2) - exp(-9/2)) / (1 - exp(-9/2))`` for
Mahalanobis distance ``m < 9``. The window keeps the peak at exactly 1 and
makes every rendered pixel a continuous function of the parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streak
from .geometry import (BLUR_PX2, Pose, SonarIntrinsics, cartesian_to_spherical_batch,
                       quat_to_rotmat, spherical_jacobian_batch)
from .scene import Scene, sh_basis, sh_basis_grad

TILE = 16
ALPHA_MAX = 0.999
_CUTOFF = 9.0
# peak of the untapered window below, so that window(0) == 1
_NORM = 1.0 - 10.0 * float(np.exp(-_CUTOFF))
_DEGENERATE = 1e-9


def window(m):
    """Gaussian footprint tapered to zero value and slope at the 3-sigma ellipse.

    ``exp(-m/2) - (10 - m) exp((m - 18)/2)``: the correction term peaks at
    2 exp(-5) (m = 8) and is about 1e-3 at the center. Being C1 at the cutoff
    keeps finite-difference checks well posed when a pixel sits on the
    ellipse boundary.
    """
    m = np.asarray(m, dtype=float)
    inside = m < _CUTOFF
    mc = np.where(inside, m, _CUTOFF)
    f = np.exp(-0.5 * mc) - (10.0 - mc) * np.exp(0.5 * (mc - 2 * _CUTOFF))
    return np.where(inside, f / _NORM, 0.0)


def window_grad(m):
    m = np.asarray(m, dtype=float)
    inside = m < _CUTOFF
    mc = np.where(inside, m, _CUTOFF)
    g = -0.5 * np.exp(-0.5 * mc) - (4.0 - 0.5 * mc) * np.exp(0.5 * (mc - 2 * _CUTOFF))
    return np.where(inside, g / _NORM, 0.0)


def _inv2(c):
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    inv = np.empty_like(c)
    inv[:, 0, 0] = c[:, 1, 1] / det
    inv[:, 1, 1] = c[:, 0, 0] / det
    inv[:, 0, 1] = -c[:, 0, 1] / det
    inv[:, 1, 0] = -c[:, 1, 0] / det
    return inv


@dataclass
class Projection:
    """Visible Gaussians of one view and their projected quantities."""

    idx: np.ndarray          # (V,) indices into the scene
    p_cam: np.ndarray        # (V, 3) sensor-frame means
    sph: np.ndarray          # (V, 3) r, theta, phi
    J: np.ndarray            # (V, 3, 3) spherical Jacobian at p_cam
    cov_cam: np.ndarray      # (V, 3, 3)
    cov_sph: np.ndarray      # (V, 3, 3)
    mean2: np.ndarray        # (V, 2) pixel-space (u, v)
    cov2: np.ndarray         # (V, 2, 2) with blur
    conic: np.ndarray        # (V, 2, 2) inverse of cov2
    view_dir: np.ndarray     # (V, 3) world-frame unit direction sensor -> Gaussian
    view_dist: np.ndarray    # (V,)
    sh_value: np.ndarray     # (V,) raw SH evaluation
    nu: np.ndarray           # (V,) clamped reflectance
    opacity: np.ndarray      # (V,)
    streak_prob: np.ndarray  # (V,)

    def __len__(self):
        return len(self.idx)


def cull(scene: Scene, pose: Pose, intr: SonarIntrinsics, force_streak_zero=False) -> Projection:
    """Keep Gaussians whose 3-sigma spherical box meets the sensor frustum."""
    R = pose.R
    p_cam = (scene.means - pose.translation) @ R
    rho2 = p_cam[:, 0] ** 2 + p_cam[:, 1] ** 2
    ok = rho2 > _DEGENERATE
    cov_world = scene.covariances()
    cov_cam = np.swapaxes(R, 0, 1)[None] @ cov_world @ R[None]
    sph = cartesian_to_spherical_batch(p_cam)
    J = np.zeros((len(scene), 3, 3))
    J[ok] = spherical_jacobian_batch(p_cam[ok])
    cov_sph = J @ cov_cam @ np.swapaxes(J, -1, -2)
    sd = np.sqrt(np.maximum(np.diagonal(cov_sph, axis1=1, axis2=2), 0.0))
    r, th, ph = sph.T
    ok &= r - 3 * sd[:, 0] <= intr.r_max
    ok &= (th + 3 * sd[:, 1] >= intr.theta_min) & (th - 3 * sd[:, 1] <= intr.theta_max)
    ok &= (ph + 3 * sd[:, 2] >= intr.phi_min) & (ph - 3 * sd[:, 2] <= intr.phi_max)
    idx = np.nonzero(ok)[0]

    p_cam, sph, J = p_cam[idx], sph[idx], J[idx]
    cov_cam, cov_sph = cov_cam[idx], cov_sph[idx]
    scale = np.array([1.0 / intr.eps_r, 1.0 / intr.eps_a])
    mean2 = np.stack([sph[:, 0] / intr.eps_r, (sph[:, 1] - intr.theta_min) / intr.eps_a], -1)
    cov2 = cov_sph[:, :2, :2] * np.outer(scale, scale)[None] + BLUR_PX2 * np.eye(2)[None]
    d = scene.means[idx] - pose.translation
    dist = np.linalg.norm(d, axis=1)
    vdir = d / dist[:, None] if len(idx) else d
    sh_value = np.einsum("nk,nk->n", scene.sh[idx], sh_basis(vdir))
    streak_prob = np.zeros(len(idx)) if force_streak_zero else scene.streak_probs[idx]
    return Projection(idx, p_cam, sph, J, cov_cam, cov_sph, mean2, cov2, _inv2(cov2),
                      vdir, dist, sh_value, np.maximum(sh_value, 0.0),
                      scene.opacities[idx], streak_prob)


# ----------------------------------------------------------------- tiling

@dataclass
class Pairs:
    """Gaussian/pixel overlaps, ordered tile-major then by Gaussian."""

    gauss: np.ndarray   # (P,) index into the projection
    pix: np.ndarray     # (P,) flat pixel index
    d: np.ndarray       # (P, 2) pixel center minus mean
    m: np.ndarray       # (P,) squared Mahalanobis distance
    n_tiles: int = 0


def _expand(counts):
    """Owner index and local offset for a ragged expansion."""
    owner = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    return owner, np.arange(owner.size) - starts[owner]


def footprint_pairs(center, cov, conic, shape, tile: int = TILE, order=None) -> Pairs:
    """Pixels whose centers fall inside each Gaussian's 3-sigma ellipse.

    Gaussians are binned into ``tile x tile`` blocks by the axis-aligned box of
    their ellipse; pairs are produced per (tile, Gaussian) and kept tile-major,
    with Gaussians inside a tile in ``order`` (default: index order).
    """
    H, W = shape
    V = len(center)
    empty = Pairs(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2)), np.zeros(0))
    if V == 0:
        return empty
    rad = 3.0 * np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
    lo = np.ceil(center - rad - 0.5).astype(np.int64)
    hi = np.floor(center + rad - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array([H - 1, W - 1]))
    valid = (hi >= lo).all(axis=1)
    tlo, thi = lo // tile, hi // tile
    ntile = np.where(valid, (thi[:, 0] - tlo[:, 0] + 1) * (thi[:, 1] - tlo[:, 1] + 1), 0)
    g, k = _expand(ntile)
    if g.size == 0:
        return empty
    ncol = thi[g, 1] - tlo[g, 1] + 1
    ti = tlo[g, 0] + k // ncol
    tj = tlo[g, 1] + k % ncol
    tiles_w = -(-W // tile)
    tile_id = ti * tiles_w + tj
    rank = np.arange(V)
    if order is not None:
        rank[np.argsort(order, kind="stable")] = np.arange(V)
    srt = np.lexsort((rank[g], tile_id))
    g, ti, tj = g[srt], ti[srt], tj[srt]
    r0 = np.maximum(ti * tile, lo[g, 0])
    r1 = np.minimum(ti * tile + tile - 1, hi[g, 0])
    c0 = np.maximum(tj * tile, lo[g, 1])
    c1 = np.minimum(tj * tile + tile - 1, hi[g, 1])
    w = c1 - c0 + 1
    owner, local = _expand((r1 - r0 + 1) * w)
    pi = r0[owner] + local // w[owner]
    pj = c0[owner] + local % w[owner]
    gp = g[owner]
    d = np.stack([pi + 0.5, pj + 0.5], -1) - center[gp]
    C = conic[gp]
    m = C[:, 0, 0] * d[:, 0] ** 2 + 2 * C[:, 0, 1] * d[:, 0] * d[:, 1] + C[:, 1, 1] * d[:, 1] ** 2
    keep = m < _CUTOFF
    return Pairs(gp[keep], pi[keep] * W + pj[keep], d[keep], m[keep], int(np.unique(tile_id).size))


# ------------------------------------------------------------ transmittance

@dataclass
class TransmittanceMap:
    tbar: np.ndarray          # (V,) per visible Gaussian
    plane: np.ndarray         # (N_e, N_a) transmittance after all Gaussians
    empty_footprints: int = 0


def elevation_plane_footprints(proj: Projection, intr: SonarIntrinsics):
    """Means and covariances on the (elevation, azimuth) plane in plane pixels."""
    mean = np.stack([(proj.sph[:, 2] - intr.phi_min) / intr.eps_e,
                     (proj.sph[:, 1] - intr.theta_min) / intr.eps_a], -1)
    sel = np.ix_(range(len(proj)), [2, 1], [2, 1])
    scale = np.array([1.0 / intr.eps_e, 1.0 / intr.eps_a])
    cov = proj.cov_sph[sel] * np.outer(scale, scale)[None] + BLUR_PX2 * np.eye(2)[None]
    return mean, cov


def compute_transmittance(proj: Projection, intr: SonarIntrinsics) -> TransmittanceMap:
    """Average front-to-back transmittance of each Gaussian over its footprint.

    Gaussians are composited on the azimuth/elevation plane in order of
    increasing range; ``T`` at a plane pixel is the product of ``1 - alpha``
    of every Gaussian in front of it there.
    """
    V = len(proj)
    shape = (intr.n_elevation, intr.n_azimuth)
    if V == 0:
        return TransmittanceMap(np.zeros(0), np.ones(shape))
    mean, cov = elevation_plane_footprints(proj, intr)
    pairs = footprint_pairs(mean, cov, _inv2(cov), shape, tile=shape[0] * shape[1])
    rank = np.empty(V, dtype=np.int64)
    rank[np.argsort(proj.sph[:, 0], kind="stable")] = np.arange(V)
    srt = np.lexsort((rank[pairs.gauss], pairs.pix))
    g, pix = pairs.gauss[srt], pairs.pix[srt]
    alpha = np.minimum(proj.opacity[g] * window(pairs.m[srt]), ALPHA_MAX)
    log_keep = np.log1p(-alpha)
    csum = np.cumsum(log_keep)
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    start = np.maximum.accumulate(np.where(first, np.arange(len(pix)), 0))
    excl = csum - log_keep - (csum[start] - log_keep[start])
    T = np.exp(np.minimum(excl, 0.0))
    count = np.bincount(g, minlength=V)
    tsum = np.bincount(g, weights=T, minlength=V)
    tbar = np.ones(V)
    has = count > 0
    tbar[has] = tsum[has] / count[has]
    plane = np.exp(np.bincount(pix, weights=log_keep, minlength=shape[0] * shape[1])).reshape(shape)
    return TransmittanceMap(np.clip(tbar, 0.0, 1.0), plane, int((~has).sum()))


# ---------------------------------------------------------------- forward

@dataclass
class RenderBundle:
    I_u: np.ndarray
    P_a: np.ndarray
    Io: np.ndarray
    Ihat: np.ndarray
    M_a: np.ndarray
    A: np.ndarray
    # intermediates for the backward pass
    proj: Projection = field(repr=False)
    pairs: Pairs = field(repr=False)
    f: np.ndarray = field(repr=False)
    weight: np.ndarray = field(repr=False)
    tbar: np.ndarray = field(repr=False)
    atten: np.ndarray = field(repr=False)
    P_raw: np.ndarray = field(repr=False)
    Io_raw: np.ndarray = field(repr=False)
    row_raw: np.ndarray = field(repr=False)
    pose: Pose = field(repr=False)
    intr: SonarIntrinsics = field(repr=False)
    n_gaussians: int = 0
    gamma: float = 10.0
    gain_applied: bool = True
    use_range_attenuation: bool = False
    empty_footprints: int = 0


def rasterize(proj: Projection, tbar, intr: SonarIntrinsics, pose: Pose, *,
              use_range_attenuation: bool = False, gamma: float = 10.0,
              apply_gain: bool = True, tile: int = TILE, n_gaussians: int | None = None
              ) -> RenderBundle:
    """Accumulate I_u, P_a and the opacity map over tiles, then apply the gain."""
    H, W = intr.shape
    tbar = np.asarray(tbar, dtype=float)
    pairs = footprint_pairs(proj.mean2, proj.cov2, proj.conic, (H, W), tile=tile,
                            order=proj.sph[:, 0])
    f = window(pairs.m)
    atten = 1.0 / proj.sph[:, 0] if use_range_attenuation else np.ones(len(proj))
    weight = proj.opacity * tbar * atten
    wf = weight[pairs.gauss] * f
    n = H * W
    I_u = np.bincount(pairs.pix, weights=proj.nu[pairs.gauss] * wf, minlength=n).reshape(H, W)
    P_raw = np.bincount(pairs.pix, weights=proj.streak_prob[pairs.gauss] * wf, minlength=n).reshape(H, W)
    Io_raw = np.bincount(pairs.pix, weights=wf, minlength=n).reshape(H, W)
    P_a = np.clip(P_raw, 0.0, 1.0)
    Io = np.clip(Io_raw, 0.0, 1.0)
    row_raw = P_a.sum(axis=1)
    M_a = np.clip(row_raw, 0.0, 1.0)
    if apply_gain:
        A = streak.adaptive_gain(P_a, M_a, gamma)
    else:
        A = np.ones((H, W))
    Ihat = A * I_u
    return RenderBundle(I_u, P_a, Io, Ihat, M_a, A, proj, pairs, f, weight, tbar, atten,
                        P_raw, Io_raw, row_raw, pose, intr,
                        len(proj) if n_gaussians is None else n_gaussians,
                        gamma, apply_gain, use_range_attenuation)


def render(scene: Scene, pose: Pose, intr: SonarIntrinsics, *,
           use_range_attenuation: bool = False, gamma: float = 10.0,
           apply_gain: bool = True, transmittance=None, tile: int = TILE,
           force_streak_zero: bool = False) -> RenderBundle:
    """Render one view.

    ``transmittance`` optionally fixes the per-Gaussian average transmittance
    (array over the whole scene); otherwise it is computed from the scene.
    """
    proj = cull(scene, pose, intr, force_streak_zero=force_streak_zero)
    empty = 0
    if transmittance is None:
        tm = compute_transmittance(proj, intr)
        tbar, empty = tm.tbar, tm.empty_footprints
    else:
        tbar = np.asarray(transmittance, dtype=float)[proj.idx]
    out = rasterize(proj, tbar, intr, pose, use_range_attenuation=use_range_attenuation,
                    gamma=gamma, apply_gain=apply_gain, tile=tile, n_gaussians=len(scene))
    out.empty_footprints = empty
    return out


def full_transmittance(bundle: RenderBundle) -> np.ndarray:
    """Per-scene-Gaussian transmittance used by ``bundle`` (1 for culled ones)."""
    t = np.ones(bundle.n_gaussians)
    t[bundle.proj.idx] = bundle.tbar
    return t


def render_dense(scene: Scene, pose: Pose, intr: SonarIntrinsics, tbar_full,
                 *, use_range_attenuation=False, truncate=True):
    """Untiled reference: evaluate every Gaussian at every pixel center.

    Returns ``(I_u, P_a_raw, Io_raw)``. With ``truncate`` the same 3-sigma
    window as the tiled path is used; otherwise the plain Gaussian.
    """
    proj = cull(scene, pose, intr)
    H, W = intr.shape
    u = np.arange(H) + 0.5
    v = np.arange(W) + 0.5
    I_u = np.zeros((H, W))
    P = np.zeros((H, W))
    O = np.zeros((H, W))
    tb = np.asarray(tbar_full, dtype=float)[proj.idx]
    for k in range(len(proj)):
        du = u[:, None] - proj.mean2[k, 0]
        dv = v[None, :] - proj.mean2[k, 1]
        C = proj.conic[k]
        m = C[0, 0] * du * du + 2 * C[0, 1] * du * dv + C[1, 1] * dv * dv
        f = window(m) if truncate else np.exp(-0.5 * m)
        w = proj.opacity[k] * tb[k]
        if use_range_attenuation:
            w /= proj.sph[k, 0]
        I_u += proj.nu[k] * w * f
        P += proj.streak_prob[k] * w * f
        O += w * f
    return I_u, P, O


# --------------------------------------------------------------- backward

@dataclass
class SceneGrad:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    streak_logits: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SceneGrad":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 9)), np.zeros(n))

    def __iadd__(self, other: "SceneGrad"):
        for k in self.__dataclass_fields__:
            getattr(self, k).__iadd__(getattr(other, k))
        return self

    def items(self):
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__]


def _quat_backward(q, gR):
    """Gradient w.r.t. raw (unnormalized) quaternions given dL/dR."""
    n = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / n).T
    G = gR
    gw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    gx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    gy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    gz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], -1)
    qn = q / n
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / n


def rasterize_backward(bundle: RenderBundle, scene: Scene, grad_ihat, grad_io=None,
                       grad_iu=None) -> SceneGrad:
    """Reverse-mode gradients of a scalar loss w.r.t. the raw scene parameters.

    ``grad_ihat``, ``grad_io`` and ``grad_iu`` are dL/d(final image),
    dL/d(opacity map) and any direct dL/d(unsaturated image). Transmittance
    is held constant.
    """
    proj, pairs = bundle.proj, bundle.pairs
    H, W = bundle.I_u.shape
    grads = SceneGrad.zeros(len(scene))
    V = len(proj)
    if V == 0 or pairs.gauss.size == 0:
        return grads
    g_hat = np.asarray(grad_ihat, dtype=float)
    g_iu = g_hat * bundle.A
    if grad_iu is not None:
        g_iu = g_iu + grad_iu
    g_p = np.zeros((H, W))
    if bundle.gain_applied:
        gA = g_hat * bundle.I_u
        g_p, g_m = streak.adaptive_gain_backward(bundle.P_a, bundle.M_a, bundle.gamma, gA)
        g_p = g_p + (g_m * (bundle.row_raw < 1.0))[:, None]
    g_p = g_p * (bundle.P_raw < 1.0)
    g_o = np.zeros((H, W)) if grad_io is None else np.asarray(grad_io, dtype=float) * (bundle.Io_raw < 1.0)

    gk, pix, f = pairs.gauss, pairs.pix, bundle.f
    gI = g_iu.ravel()[pix]
    gP = g_p.ravel()[pix]
    gO = g_o.ravel()[pix]
    w = bundle.weight
    g_nu = np.bincount(gk, weights=gI * f, minlength=V) * w
    g_pk = np.bincount(gk, weights=gP * f, minlength=V) * w
    G = gI * proj.nu[gk] + gP * proj.streak_prob[gk] + gO
    g_w = np.bincount(gk, weights=G * f, minlength=V)
    g_opa = g_w * bundle.tbar * bundle.atten
    r = proj.sph[:, 0]
    g_r = np.zeros(V)
    if bundle.use_range_attenuation:
        g_r -= g_w * proj.opacity * bundle.tbar / r ** 2

    gm = G * w[gk] * window_grad(pairs.m)
    C = proj.conic[gk]
    d = pairs.d
    Cd = np.einsum("pij,pj->pi", C, d)
    g_mean2 = np.stack([np.bincount(gk, weights=-2 * gm * Cd[:, a], minlength=V) for a in range(2)], -1)
    ddT = d[:, :, None] * d[:, None, :]
    g_conic = np.stack([np.bincount(gk, weights=gm * ddT[:, a, b], minlength=V)
                        for a in range(2) for b in range(2)], -1).reshape(V, 2, 2)
    g_cov2 = -proj.conic @ g_conic @ proj.conic
    intr = bundle.intr
    S = np.diag([1.0 / intr.eps_r, 1.0 / intr.eps_a])
    g_covs2 = S[None] @ g_cov2 @ S[None]
    g_covs2 = 0.5 * (g_covs2 + np.swapaxes(g_covs2, 1, 2))
    g_r += g_mean2[:, 0] / intr.eps_r
    g_th = g_mean2[:, 1] / intr.eps_a

    J2 = proj.J[:, :2, :]
    g_cov_cam = np.swapaxes(J2, 1, 2) @ g_covs2 @ J2
    gJ2 = 2.0 * g_covs2 @ J2 @ proj.cov_cam

    p = proj.p_cam
    x, y = p[:, 0], p[:, 1]
    rho2 = x * x + y * y
    g_p = np.einsum("vi,vij->vj", np.stack([g_r, g_th], -1), J2)
    phat = p / r[:, None]
    gJ0 = gJ2[:, 0]
    g_p += (gJ0 - phat * np.sum(gJ0 * phat, axis=1, keepdims=True)) / r[:, None]
    gJ1 = gJ2[:, 1]
    rho4 = rho2 * rho2
    g_p[:, 0] += gJ1[:, 0] * 2 * x * y / rho4 + gJ1[:, 1] * (1 / rho2 - 2 * x * x / rho4)
    g_p[:, 1] += gJ1[:, 0] * (-1 / rho2 + 2 * y * y / rho4) + gJ1[:, 1] * (-2 * x * y / rho4)

    Rp = bundle.pose.R
    g_means = g_p @ Rp.T

    # reflectance: raw SH value clamped at zero, view direction from the sensor
    live = (proj.sh_value > 0).astype(float)
    g_sh_val = g_nu * live
    grads.sh[proj.idx] = g_sh_val[:, None] * sh_basis(proj.view_dir)
    sidx = proj.idx
    g_dir = g_sh_val[:, None] * np.einsum("vk,vkj->vj", scene.sh[sidx], sh_basis_grad(proj.view_dir))
    vd = proj.view_dir
    g_means += (g_dir - vd * np.sum(vd * g_dir, axis=1, keepdims=True)) / proj.view_dist[:, None]
    grads.means[sidx] = g_means

    g_cov_world = Rp[None] @ g_cov_cam @ Rp.T[None]
    q = scene.quats[sidx]
    Rq = quat_to_rotmat(q)
    s = np.exp(scene.log_scales[sidx])
    M = Rq * s[:, None, :]
    gM = 2.0 * g_cov_world @ M
    gRq = gM * s[:, None, :]
    g_s = np.sum(gM * Rq, axis=1)
    grads.log_scales[sidx] = g_s * s
    grads.quats[sidx] = _quat_backward(q, gRq)

    o = proj.opacity
    grads.opacity_logits[sidx] = g_opa * o * (1 - o)
    pk = proj.streak_prob
    grads.streak_logits[sidx] = g_pk * pk * (1 - pk)
    return grads
