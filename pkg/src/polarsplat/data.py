"""Posed sonar datasets, analytic synthetic scenes, and the quadrature reference renderer.

The reference renderer integrates the sonar formation model numerically per
range/azimuth bin: returns are summed over elevation, weighted by the
transmittance accumulated along range. Emitted intensity is fixed at 1 and
the ``1/r`` spreading term is dropped (images are taken to be gain adjusted).
Bin values are normalized by the angular pixel area ``eps_a * eps_e``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import streak
from .geometry import Pose, SonarIntrinsics, cartesian_to_spherical_batch
from .reconstruct import TriangleMesh
from .scene import Scene, sh_basis

QUAT_TOL = 1e-6


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class MissingFileError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class QuaternionNormError(DatasetError):
    pass


# ---------------------------------------------------------------- images

def quantize(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 65535).astype(np.uint16)


def save_png16(img, path) -> None:
    Image.fromarray(quantize(img)).save(path)


def load_png16(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 65535.0


# --------------------------------------------------------------- dataset

@dataclass
class Frame:
    image: np.ndarray
    pose: Pose
    frame_id: int


@dataclass
class Dataset:
    intrinsics: SonarIntrinsics
    frames: list
    holdout_every: int = 8

    def __post_init__(self):
        for f in self.frames:
            if f.image.shape != self.intrinsics.shape:
                raise DimensionMismatchError(
                    f"frame {f.frame_id}: image {f.image.shape} != sensor {self.intrinsics.shape}")

    def __len__(self):
        return len(self.frames)

    def is_validation(self, position: int) -> bool:
        return position % self.holdout_every == 0 and len(self.frames) >= 2

    def train_frames(self):
        return [(f.image, f.pose) for i, f in enumerate(self.frames) if not self.is_validation(i)]

    def val_frames(self):
        return [(f.image, f.pose) for i, f in enumerate(self.frames) if self.is_validation(i)]

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "images").mkdir(parents=True, exist_ok=True)
        self.intrinsics.save(d / "sensor.json")
        poses = [f.pose.to_dict(int(f.frame_id)) for f in self.frames]
        (d / "poses.json").write_text(json.dumps(poses, indent=1))
        for f in self.frames:
            save_png16(f.image, d / "images" / f"{int(f.frame_id):05d}.png")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in ("sensor.json", "poses.json"):
        if not (d / name).is_file():
            raise MissingFileError(f"{d / name} not found")
    intr = SonarIntrinsics.load(d / "sensor.json")
    entries = json.loads((d / "poses.json").read_text())
    frames = []
    for e in sorted(entries, key=lambda e: int(e["id"])):
        q = np.asarray(e["q"], dtype=float)
        t = np.asarray(e["t"], dtype=float)
        if q.shape != (4,) or t.shape != (3,) or not (np.isfinite(q).all() and np.isfinite(t).all()):
            raise DatasetError(f"frame {e['id']}: malformed pose")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise QuaternionNormError(f"frame {e['id']}: quaternion norm {np.linalg.norm(q):.9f}")
        path = d / "images" / f"{int(e['id']):05d}.png"
        if not path.is_file():
            raise MissingFileError(f"{path} not found")
        img = load_png16(path)
        if img.shape != intr.shape:
            raise DimensionMismatchError(f"{path}: image {img.shape} != sensor {intr.shape}")
        frames.append(Frame(img, Pose(q, t), int(e["id"])))
    return Dataset(intr, frames)


# ---------------------------------------------------------- analytic surfaces

@dataclass
class Plane:
    """Rectangle through ``center`` with unit ``normal``; ``u_axis`` spans its first side."""

    center: tuple
    normal: tuple
    u_axis: tuple
    half_size: tuple
    reflectance: float = 1.0
    streak_source: bool = False

    def intersect(self, o, d):
        c, n = np.asarray(self.center, float), _unit(self.normal)
        u = _unit(self.u_axis)
        v = np.cross(n, u)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / den
        p = o + t[:, None] * d
        inside = (np.abs((p - c) @ u) <= self.half_size[0]) & (np.abs((p - c) @ v) <= self.half_size[1])
        t = np.where((np.abs(den) > 1e-12) & (t > 1e-9) & inside, t, np.inf)
        return t, np.broadcast_to(n, d.shape)

    def to_mesh(self, n: int = 32) -> TriangleMesh:
        c, nrm = np.asarray(self.center, float), _unit(self.normal)
        u = _unit(self.u_axis)
        v = np.cross(nrm, u)
        a = np.linspace(-self.half_size[0], self.half_size[0], n + 1)
        b = np.linspace(-self.half_size[1], self.half_size[1], n + 1)
        A, B = np.meshgrid(a, b, indexing="ij")
        verts = c + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
        return TriangleMesh(verts, _grid_faces(n + 1, n + 1))


@dataclass
class Sphere:
    center: tuple
    radius: float
    reflectance: float = 1.0
    streak_source: bool = False

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - self.radius ** 2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, (p - c) / self.radius

    def to_mesh(self, n: int = 32) -> TriangleMesh:
        th = np.linspace(0, np.pi, n + 1)
        ph = np.linspace(0, 2 * np.pi, 2 * n + 1)
        T, P = np.meshgrid(th, ph, indexing="ij")
        pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
        mesh = TriangleMesh(np.asarray(self.center) + self.radius * pts, _grid_faces(n + 1, 2 * n + 1))
        return mesh.compact()


@dataclass
class Cylinder:
    """Lateral surface of a finite cylinder standing on ``base`` along ``axis``."""

    base: tuple
    axis: tuple
    radius: float
    height: float
    reflectance: float = 1.0
    streak_source: bool = False

    def intersect(self, o, d):
        a = _unit(self.axis)
        b = np.asarray(self.base, float)
        ob = o - b
        dp = d - np.outer(d @ a, a)
        op = ob - (ob @ a) * a
        qa = np.einsum("ij,ij->i", dp, dp)
        qb = 2 * dp @ op
        qc = op @ op - self.radius ** 2
        disc = qb * qb - 4 * qa * qc
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            roots = np.stack([(-qb - sq) / (2 * qa), (-qb + sq) / (2 * qa)], -1)
        h = (ob @ a)[None, None] + roots * (d @ a)[:, None]
        ok = (disc[:, None] >= 0) & (qa[:, None] > 1e-12) & (roots > 1e-9) & (h >= 0) & (h <= self.height)
        roots = np.where(ok, roots, np.inf)
        t = roots.min(axis=1)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        radial = (p - b) - np.outer((p - b) @ a, a)
        return t, radial / self.radius

    def to_mesh(self, n: int = 64, n_h: int = 16) -> TriangleMesh:
        a = _unit(self.axis)
        e1 = _unit(np.cross(a, [1.0, 0, 0]) if abs(a[0]) < 0.9 else np.cross(a, [0, 1.0, 0]))
        e2 = np.cross(a, e1)
        ang = np.linspace(0, 2 * np.pi, n + 1)
        hh = np.linspace(0, self.height, n_h + 1)
        H, G = np.meshgrid(hh, ang, indexing="ij")
        ring = np.cos(G)[..., None] * e1 + np.sin(G)[..., None] * e2
        verts = np.asarray(self.base) + H[..., None] * a + self.radius * ring
        mesh = TriangleMesh(verts.reshape(-1, 3), _grid_faces(n_h + 1, n + 1))
        # weld the seam
        idx = np.arange(len(mesh.vertices)).reshape(n_h + 1, n + 1)
        remap = idx.copy()
        remap[:, -1] = idx[:, 0]
        return TriangleMesh(mesh.vertices, remap.ravel()[mesh.triangles]).compact()


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _grid_faces(rows, cols):
    i, j = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    a = (i * cols + j).ravel()
    b, c, d = a + 1, a + cols, a + cols + 1
    return np.concatenate([np.stack([a, c, b], -1), np.stack([b, c, d], -1)])


@dataclass
class SyntheticScene:
    surfaces: list
    noise: float = 0.0

    def gt_mesh(self, include_planes: bool = True) -> TriangleMesh:
        meshes = [s.to_mesh() for s in self.surfaces if include_planes or not isinstance(s, Plane)]
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        if not verts:
            return TriangleMesh()
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


# ------------------------------------------------------- reference renderer

def _ray_grid(intr: SonarIntrinsics, q: int):
    """Midpoint-quadrature azimuth and elevation samples (q per bin per axis)."""
    th = intr.theta_min + (np.arange(intr.n_azimuth * q) + 0.5) * intr.eps_a / q
    ph = intr.phi_min + (np.arange(intr.n_elevation * q) + 0.5) * intr.eps_e / q
    return th, ph


def _directions(th, ph):
    T, P = np.meshgrid(th, ph, indexing="ij")
    return np.stack([np.cos(P) * np.cos(T), np.cos(P) * np.sin(T), np.sin(P)], -1)


def surface_hits(surfaces, pose: Pose, intr: SonarIntrinsics, quadrature: int = 8):
    """First-hit range, incidence cosine and surface index for every quadrature ray.

    Arrays are shaped (n_azimuth * q, n_elevation * q); misses have range inf
    and surface index -1.
    """
    th, ph = _ray_grid(intr, quadrature)
    d_cam = _directions(th, ph).reshape(-1, 3)
    d = d_cam @ pose.R.T
    o = pose.translation
    best = np.full(len(d), np.inf)
    cosi = np.zeros(len(d))
    which = np.full(len(d), -1)
    for k, s in enumerate(surfaces):
        t, n = s.intersect(o, d)
        closer = t < best
        best = np.where(closer, t, best)
        cosi = np.where(closer, np.abs(np.einsum("ij,ij->i", n, d)), cosi)
        which = np.where(closer, k, which)
    shape = (len(th), len(ph))
    return best.reshape(shape), cosi.reshape(shape), which.reshape(shape)


def _bin_hits(rng_hit, weight, intr: SonarIntrinsics, q: int):
    ii = np.floor(rng_hit / intr.eps_r)
    jj = np.repeat(np.arange(intr.n_azimuth), q)[:, None] * np.ones_like(ii, dtype=int)
    ok = np.isfinite(ii) & (ii >= 0) & (ii < intr.n_range)
    flat = ii[ok].astype(int) * intr.n_azimuth + jj[ok]
    img = np.bincount(flat, weights=weight[ok], minlength=intr.n_range * intr.n_azimuth)
    return img.reshape(intr.shape) / (q * q)


def oracle_render_surfaces(scene: SyntheticScene, pose: Pose, intr: SonarIntrinsics,
                           quadrature: int = 8, only_streak_sources: bool = False):
    """Opaque analytic surfaces: each ray returns ``reflectance * |cos(incidence)|``
    at its first hit."""
    if quadrature < 4:
        raise ValueError("quadrature must be >= 4 samples per axis")
    rng_hit, cosi, which = surface_hits(scene.surfaces, pose, intr, quadrature)
    refl = np.array([s.reflectance for s in scene.surfaces] + [0.0])
    w = refl[which] * cosi
    if only_streak_sources:
        src = np.array([s.streak_source for s in scene.surfaces] + [False])
        w = np.where(src[which], 1.0, 0.0)
    return _bin_hits(rng_hit, w, intr, quadrature)


def _numeric_spherical_cov(p_cam, cov_cam, h=1e-6):
    J = np.zeros((3, 3))
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        diff = cartesian_to_spherical_batch(p_cam + e) - cartesian_to_spherical_batch(p_cam - e)
        diff[1] = (diff[1] + np.pi) % (2 * np.pi) - np.pi
        J[:, a] = diff / (2 * h)
    return J @ cov_cam @ J.T


def oracle_render_gaussians(scene: Scene, pose: Pose, intr: SonarIntrinsics,
                            quadrature: int = 8, use_range_attenuation: bool = False):
    """Midpoint quadrature of the formation integral for a Gaussian scene.

    Emission density of Gaussian k is its opacity-weighted 3D Gaussian,
    normalized along elevation so it integrates to ``o_k`` times a peak-1
    range/azimuth profile; extinction uses the same Gaussian normalized along
    range. Transmittance at a range sample is ``exp(-tau)`` with ``tau`` the
    midpoint-rule optical depth up to that sample.
    """
    if quadrature < 4:
        raise ValueError("quadrature must be >= 4 samples per axis")
    H, W = intr.shape
    img = np.zeros((H, W))
    if len(scene) == 0:
        return img
    q = quadrature
    r = (np.arange(H * q) + 0.5) * intr.eps_r / q
    th, ph = _ray_grid(intr, q)
    dr = intr.eps_r / q
    R = pose.R
    covs = scene.covariances()
    prec = np.linalg.inv(covs)
    p_cam = (scene.means - pose.translation) @ R
    vdir = scene.means - pose.translation
    vdir /= np.linalg.norm(vdir, axis=1, keepdims=True)
    nu = np.maximum(0.0, np.einsum("nk,nk->n", scene.sh, sh_basis(vdir)))
    o = scene.opacities
    norm_e, norm_x = np.zeros(len(scene)), np.zeros(len(scene))
    for k in range(len(scene)):
        ps = np.linalg.inv(_numeric_spherical_cov(p_cam[k], R.T @ covs[k] @ R))
        norm_e[k] = math.sqrt(ps[2, 2] / (2 * math.pi))
        norm_x[k] = math.sqrt(ps[0, 0] / (2 * math.pi))
    # conservative per-Gaussian support (5 sigma) for culling columns and range samples
    rad = 5.0 * scene.scales.max(axis=1)
    dist = np.linalg.norm(p_cam, axis=1)
    g_th = np.arctan2(p_cam[:, 1], p_cam[:, 0])
    g_dth = np.arcsin(np.clip(rad / np.maximum(np.hypot(p_cam[:, 0], p_cam[:, 1]), 1e-12), 0, 1))
    g_dth = np.where(rad >= np.hypot(p_cam[:, 0], p_cam[:, 1]), np.pi, g_dth)
    lo_r = np.searchsorted(r, dist - rad)
    hi_r = np.searchsorted(r, dist + rad)
    cp, sp = np.cos(ph), np.sin(ph)
    for j in range(W):
        tj = th[j * q:(j + 1) * q]
        dirs = np.stack([cp[None, :] * np.cos(tj)[:, None], cp[None, :] * np.sin(tj)[:, None],
                         np.broadcast_to(sp, (q, len(ph)))], -1)
        # (q_theta, n_phi, 3) world directions; points (n_r, q_theta, n_phi, 3)
        dirs_w = dirs @ R.T
        pts = pose.translation + r[:, None, None, None] * dirs_w[None]
        emit = np.zeros(pts.shape[:-1])
        ext = np.zeros(pts.shape[:-1])
        t0, t1 = intr.theta_min + j * intr.eps_a, intr.theta_min + (j + 1) * intr.eps_a
        for k in range(len(scene)):
            if g_th[k] + g_dth[k] < t0 or g_th[k] - g_dth[k] > t1 or lo_r[k] >= hi_r[k]:
                continue
            sl = slice(lo_r[k], hi_r[k])
            d = pts[sl] - scene.means[k]
            m = np.einsum("...i,ij,...j->...", d, prec[k], d)
            g = o[k] * np.exp(-0.5 * m)
            atten = 1.0 / r[sl, None, None] if use_range_attenuation else 1.0
            emit[sl] += nu[k] * g * norm_e[k] * atten
            ext[sl] += g * norm_x[k]
        # optical depth up to each midpoint: earlier samples plus half of this one
        tau = (np.cumsum(ext, axis=0) - 0.5 * ext) * dr
        T = np.exp(-tau)
        col = (T * emit).sum(axis=(1, 2)) * dr * (intr.eps_a / q) * (intr.eps_e / q)
        img[:, j] = col.reshape(H, q).sum(axis=1) / (intr.eps_r * intr.eps_a)
    return img


def oracle_render(target, pose: Pose, intr: SonarIntrinsics, quadrature: int = 8, **kw):
    if isinstance(target, Scene):
        return oracle_render_gaussians(target, pose, intr, quadrature, **kw)
    if isinstance(target, SyntheticScene):
        return oracle_render_surfaces(target, pose, intr, quadrature, **kw)
    raise TypeError(f"cannot render {type(target).__name__}")


# ------------------------------------------------------- synthetic datasets

def orbit_trajectory(center, radius: float, height: float, n: int, arc_deg: float = 360.0,
                     start_deg: float = 0.0, target=None, height_offsets=(0.0,),
                     radius_offsets=(0.0,)) -> list:
    """Poses on an arc around ``center``, each looking at ``target``.

    Frame k uses ``height + height_offsets[k % len]`` and likewise for the
    radius; alternating offsets give views from several elevations, which a
    single horizontal circle around a symmetric object cannot provide.
    """
    center = np.asarray(center, dtype=float)
    target = center if target is None else np.asarray(target, dtype=float)
    closed = abs(arc_deg - 360.0) < 1e-9
    ang = np.radians(start_deg + np.linspace(0, arc_deg, n, endpoint=not closed))
    poses = []
    for k, a in enumerate(ang):
        rad = radius + radius_offsets[k % len(radius_offsets)]
        h = height + height_offsets[k % len(height_offsets)]
        pos = center + np.array([rad * math.cos(a), rad * math.sin(a), h])
        poses.append(Pose.look_at(pos, target))
    return poses


@dataclass
class SyntheticData:
    dataset: Dataset
    clean: list
    streak_rows: list
    P_a: list
    gt_mesh: TriangleMesh
    scene: SyntheticScene = field(repr=False, default=None)


def inject_streaks(clean, source_coverage, gamma: float, strength: float = 1.0):
    """Apply the adaptive gain driven by streak-source coverage.

    Every pixel touched by a streak source gets streak probability
    ``strength``, so rows holding a source go dark apart from the source itself.

    Returns ``(streaked, P_a, M_a)``.
    """
    P = np.clip(strength * (np.asarray(source_coverage) > 0), 0.0, 1.0)
    M = streak.streak_mass(P)
    A = streak.adaptive_gain(P, M, gamma)
    return A * clean, P, M


def generate_synthetic(spec: SyntheticScene, trajectory, intr: SonarIntrinsics,
                       gamma: float = 10.0, seed=0, quadrature: int = 8,
                       streak_strength: float = 1.0) -> SyntheticData:
    """Render clean images, inject streaks from flagged surfaces, add noise."""
    rng = np.random.default_rng(seed)
    frames, cleans, labels, pas = [], [], [], []
    has_src = any(s.streak_source for s in spec.surfaces)
    for i, pose in enumerate(trajectory):
        clean = np.clip(oracle_render_surfaces(spec, pose, intr, quadrature), 0.0, 1.0)
        if has_src:
            cov = oracle_render_surfaces(spec, pose, intr, quadrature, only_streak_sources=True)
            img, P, M = inject_streaks(clean, cov, gamma, streak_strength)
        else:
            img, P, M = clean.copy(), np.zeros(intr.shape), np.zeros(intr.n_range)
        if spec.noise > 0:
            img = img + spec.noise * rng.standard_normal(img.shape)
        img = np.clip(img, 0.0, 1.0)
        frames.append(Frame(img, pose, i))
        cleans.append(clean)
        labels.append(M > 0)
        pas.append(P)
    mesh = spec.gt_mesh()
    return SyntheticData(Dataset(intr, frames), cleans, labels, pas, mesh, spec)


# ---------------------------------------------------------------- presets

PRESETS = ("tiny", "spheres", "cylinder")


def make_preset(name: str, n_frames: int | None = None, intrinsics: SonarIntrinsics | None = None):
    """Named synthetic setups: ``(SyntheticScene, trajectory, intrinsics)``.

    ``tiny``: 16 frames of seafloor with a sphere and a small streak-casting
    reflector. ``spheres``: 64 frames of seafloor with two spheres.
    ``cylinder``: 64 frames on a 200 degree arc around a free-standing
    cylinder, alternating between two heights and radii. It has no seafloor,
    so the ground-truth mesh is the object alone.
    """
    intr = intrinsics or SonarIntrinsics.from_fov(60.0, 20.0, 4.0, 64, 48)
    floor = Plane((0.0, 0.0, -1.2), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (3.0, 3.0), reflectance=0.3)
    if name == "tiny":
        spec = SyntheticScene([floor, Sphere((0.8, 0.8, -0.95), 0.25, 0.12),
                               Sphere((0.0, 0.0, -1.12), 0.08, 0.2, streak_source=True)])
        traj = orbit_trajectory((0, 0, 0), 2.5, 0.4, n_frames or 16, target=(0, 0, -1.2))
    elif name == "spheres":
        spec = SyntheticScene([floor, Sphere((0.4, 0.5, -0.8), 0.35, 0.12),
                               Sphere((-0.3, -0.5, -0.85), 0.3, 0.12)])
        traj = orbit_trajectory((0, 0, 0), 2.5, 0.4, n_frames or 64, target=(0, 0, -0.9))
    elif name == "cylinder":
        spec = SyntheticScene([Cylinder((0.0, 0.0, -1.2), (0, 0, 1), 0.4, 0.9, 0.3)])
        traj = orbit_trajectory((0, 0, 0), 2.4, 0.3, n_frames or 64, arc_deg=200.0,
                                target=(0, 0, -0.75), height_offsets=(0.0, 0.6),
                                radius_offsets=(0.0, -0.4))
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return spec, traj, intr
