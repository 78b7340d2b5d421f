"""Gaussian scene storage, reflectance, initialization, densification and pruning.

Parameters are held structure-of-arrays style in :class:`Scene`; the
:class:`Gaussian` dataclass is a single-primitive view used at API edges.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, SonarIntrinsics, quat_to_rotmat, rotmat_to_quat

log = logging.getLogger(__name__)

SH_DEGREE = 2
N_SH = (SH_DEGREE + 1) ** 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)

DEFAULT_OPACITY = 0.1
DEFAULT_STREAK_PROB = 0.01
DEFAULT_PRUNE_THRESHOLD = 0.005

CHECKPOINT_MAGIC = b"SSPL1"
_RECORD_FLOATS = 3 + 3 + 4 + 1 + N_SH + 1 + 3


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


# ----------------------------------------------------------- spherical harmonics

def sh_basis(dirs) -> np.ndarray:
    """Real SH basis up to degree 2 for (..., 3) unit directions -> (..., 9)."""
    d = np.asarray(dirs, dtype=float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ], -1)


def sh_basis_grad(dirs) -> np.ndarray:
    """d basis / d direction: (..., 9, 3)."""
    d = np.asarray(dirs, dtype=float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    o = np.zeros_like(x)
    rows = [
        (o, o, o),
        (o, -SH_C1 + o, o),
        (o, o, SH_C1 + o),
        (-SH_C1 + o, o, o),
        (SH_C2[0] * y, SH_C2[0] * x, o),
        (o, SH_C2[1] * z, SH_C2[1] * y),
        (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
        (SH_C2[3] * z, o, SH_C2[3] * x),
        (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, o),
    ]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def sh_encode_constant(value):
    """Degree-0 coefficient vector(s) whose evaluation equals ``value`` everywhere."""
    value = np.asarray(value, dtype=float)
    out = np.zeros(value.shape + (N_SH,))
    out[..., 0] = value / SH_C0
    return out


# ------------------------------------------------------------------ types

@dataclass
class Gaussian:
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray
    streak_logit: float
    s_init: np.ndarray

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def streak_prob(self):
        return float(sigmoid(self.streak_logit))


PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh", "streak_logits")
_PARAM_SHAPES = {"means": (3,), "log_scales": (3,), "quats": (4,), "opacity_logits": (),
                 "sh": (N_SH,), "streak_logits": (), "s_init": (3,)}


@dataclass(eq=False)
class Scene:
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sh: np.ndarray = field(default_factory=lambda: np.zeros((0, N_SH)))
    streak_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s_init: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    generation: int = 0

    def __post_init__(self):
        for name, shp in _PARAM_SHAPES.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr.reshape((-1,) + shp))
        n = {len(getattr(self, k)) for k in _PARAM_SHAPES}
        if len(n) > 1:
            raise ValueError(f"inconsistent parameter lengths {n}")

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                        float(self.opacity_logits[i]), self.sh[i].copy(),
                        float(self.streak_logits[i]), self.s_init[i].copy())

    @classmethod
    def from_gaussians(cls, gaussians) -> "Scene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls()
        return cls(
            means=[g.mu for g in gaussians], log_scales=[g.log_scale for g in gaussians],
            quats=[g.rotation for g in gaussians],
            opacity_logits=[g.opacity_logit for g in gaussians],
            sh=[g.sh_coeffs for g in gaussians],
            streak_logits=[g.streak_logit for g in gaussians],
            s_init=[g.s_init for g in gaussians],
        )

    def copy(self) -> "Scene":
        return Scene(**{k: getattr(self, k).copy() for k in _PARAM_SHAPES},
                     generation=self.generation)

    # activations
    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def streak_probs(self):
        return sigmoid(self.streak_logits)

    def covariances(self) -> np.ndarray:
        R = quat_to_rotmat(self.quats) if len(self) else np.zeros((0, 3, 3))
        M = R * self.scales[:, None, :]
        return M @ np.swapaxes(M, -1, -2)

    def reflectance(self, view_dirs) -> np.ndarray:
        return np.maximum(0.0, np.einsum("nk,nk->n", self.sh, sh_basis(view_dirs)))

    def extent(self) -> float:
        if len(self) == 0:
            return 0.0
        c = self.means.mean(0)
        return float(np.linalg.norm(self.means - c, axis=1).max())

    def append(self, other: "Scene") -> "Scene":
        """New scene with ``other``'s Gaussians appended after this scene's."""
        return Scene(**{k: np.concatenate([getattr(self, k), getattr(other, k)])
                        for k in _PARAM_SHAPES}, generation=self.generation + 1)

    def select(self, keep) -> "Scene":
        return Scene(**{k: getattr(self, k)[keep] for k in _PARAM_SHAPES},
                     generation=self.generation + 1)

    def check_finite(self) -> bool:
        return all(np.isfinite(getattr(self, k)).all() for k in _PARAM_SHAPES)

    # ----------------------------------------------------------- checkpoints
    def save(self, path) -> None:
        rec = np.concatenate([
            self.means, self.log_scales, self.quats, self.opacity_logits[:, None],
            self.sh, self.streak_logits[:, None], self.s_init,
        ], axis=1).astype("<f4")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(self)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "Scene":
        raw = Path(path).read_bytes()
        if raw[:5] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a scene checkpoint")
        (n,) = struct.unpack("<Q", raw[5:13])
        rec = np.frombuffer(raw, dtype="<f4", offset=13)
        if rec.size != n * _RECORD_FLOATS:
            raise ValueError(f"{path}: truncated checkpoint")
        rec = rec.reshape(n, _RECORD_FLOATS).astype(float)
        cols = np.cumsum([0, 3, 3, 4, 1, N_SH, 1, 3])
        parts = [rec[:, a:b] for a, b in zip(cols[:-1], cols[1:])]
        return cls(means=parts[0], log_scales=parts[1], quats=parts[2],
                   opacity_logits=parts[3][:, 0], sh=parts[4],
                   streak_logits=parts[5][:, 0], s_init=parts[6])


def build_covariance(g: Gaussian) -> np.ndarray:
    R = quat_to_rotmat(g.rotation)
    M = R * np.exp(g.log_scale)[None, :]
    return M @ M.T


def eval_reflectance(g: Gaussian, view_dir) -> float:
    return float(max(0.0, np.dot(g.sh_coeffs, sh_basis(view_dir))))


# --------------------------------------------------------- arc spawning

def spawn_on_arcs(r, theta, phi, pose: Pose, intr: SonarIntrinsics, n_per_arc: int,
                  intensity, opacity=DEFAULT_OPACITY,
                  streak_prob=DEFAULT_STREAK_PROB) -> Scene:
    """Gaussians at sensor-frame spherical points, aligned with the local (r, theta, phi) frame.

    ``r``, ``theta``, ``phi`` and ``intensity`` are flat arrays of equal length.
    """
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n = len(r)
    if n == 0:
        return Scene()
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    e_r = np.stack([cp * ct, cp * st, sp], -1)
    e_t = np.stack([-st, ct, np.zeros_like(st)], -1)
    e_p = np.stack([-sp * ct, -sp * st, cp], -1)
    R_local = np.stack([e_r, e_t, e_p], -1)
    R_world = pose.R[None] @ R_local
    quats = np.array([rotmat_to_quat(m) for m in R_world])
    means = pose.to_world(r[:, None] * e_r)
    s_init = 0.5 * np.stack([
        np.full(n, intr.eps_r), r * intr.eps_a,
        r * (intr.phi_max - intr.phi_min) / n_per_arc,
    ], -1)
    return Scene(
        means=means, log_scales=np.log(s_init), quats=quats,
        opacity_logits=np.full(n, float(logit(opacity))),
        sh=sh_encode_constant(np.asarray(intensity, dtype=float)),
        streak_logits=np.full(n, float(logit(streak_prob))),
        s_init=s_init,
    )


def arc_elevations(intr: SonarIntrinsics, n: int) -> np.ndarray:
    """Midpoints of ``n`` equal elevation slices of the vertical field of view."""
    return intr.phi_min + (np.arange(n) + 0.5) * (intr.phi_max - intr.phi_min) / n


def init_from_images(images, poses, intr: SonarIntrinsics, tau_init: float, n_init: int,
                     opacity=DEFAULT_OPACITY, streak_prob=DEFAULT_STREAK_PROB) -> Scene:
    """Seed Gaussians along the elevation arc of every pixel brighter than ``tau_init``."""
    if len(images) != len(poses):
        raise ValueError("images and poses must have the same length")
    if not 0 < tau_init < 1:
        raise ValueError("tau_init must lie in (0, 1)")
    r_c, th_c = intr.pixel_centers()
    phis = arc_elevations(intr, n_init)
    parts = []
    for img, pose in zip(images, poses):
        img = np.asarray(img, dtype=float)
        ii, jj = np.nonzero(img > tau_init)
        if len(ii) == 0:
            continue
        parts.append(spawn_on_arcs(
            np.repeat(r_c[ii], n_init), np.repeat(th_c[jj], n_init),
            np.tile(phis, len(ii)), pose, intr, n_init,
            np.repeat(img[ii, jj], n_init), opacity, streak_prob))
    if not parts:
        log.warning("no pixel exceeds tau_init=%g; scene is empty", tau_init)
        return Scene()
    scene = parts[0]
    for p in parts[1:]:
        scene = scene.append(p)
    scene.generation = 0
    return scene


def sample_pixels(loss_image, n: int, rng: np.random.Generator) -> np.ndarray:
    """Flat pixel indices drawn with probability proportional to ``loss_image``.

    Draws are without replacement while the support has unused pixels; any
    remainder beyond the support size is drawn with replacement.
    """
    w = np.asarray(loss_image, dtype=float).ravel()
    if (w < 0).any():
        raise ValueError("loss image must be non-negative")
    total = w.sum()
    if n <= 0 or total <= 0:
        return np.zeros(0, dtype=int)
    p = w / total
    support = int(np.count_nonzero(w))
    k = min(n, support)
    picks = rng.choice(w.size, size=k, replace=False, p=p)
    if n > k:
        picks = np.concatenate([picks, rng.choice(w.size, size=n - k, replace=True, p=p)])
    return picks


def densify_esds(scene: Scene, loss_image, pose: Pose, intr: SonarIntrinsics,
                 n_pixels: int, n_per_arc: int, rng_seed=None, intensity_image=None,
                 opacity=DEFAULT_OPACITY, streak_prob=DEFAULT_STREAK_PROB) -> Scene:
    """Spawn ``n_per_arc`` Gaussians on the elevation arcs of loss-sampled pixels.

    Elevations are stratified: one jittered sample per equal slice of the
    vertical field of view. Existing Gaussians are left untouched.
    """
    rng = np.random.default_rng(rng_seed)
    picks = sample_pixels(loss_image, n_pixels, rng)
    if len(picks) == 0:
        return scene
    ii, jj = np.unravel_index(picks, intr.shape)
    r_c, th_c = intr.pixel_centers()
    slice_w = (intr.phi_max - intr.phi_min) / n_per_arc
    phis = intr.phi_min + (np.arange(n_per_arc)[None, :] + rng.random((len(picks), n_per_arc))) * slice_w
    if intensity_image is None:
        inten = np.full(len(picks), 0.5)
    else:
        inten = np.asarray(intensity_image, dtype=float)[ii, jj]
    new = spawn_on_arcs(np.repeat(r_c[ii], n_per_arc), np.repeat(th_c[jj], n_per_arc),
                        phis.ravel(), pose, intr, n_per_arc,
                        np.repeat(inten, n_per_arc), opacity, streak_prob)
    return scene.append(new)


def prune(scene: Scene, tau_prune: float = DEFAULT_PRUNE_THRESHOLD) -> Scene:
    if not 0 < tau_prune < 1:
        raise ValueError("tau_prune must lie in (0, 1)")
    keep = scene.opacities >= tau_prune
    if keep.all():
        return scene
    return scene.select(keep)
