"""Mesh extraction from a Gaussian scene and surface-distance evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .geometry import quat_to_rotmat
from .scene import Scene

log = logging.getLogger(__name__)

DEFAULT_ISO = 0.3
DEFAULT_SAMPLES_PER_GAUSSIAN = 25
DEFAULT_MIN_COMPONENT = 20
DENSITY_CUTOFF_SIGMA = 4.0


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def transformed(self, R, t) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(R).T + t, self.triangles.copy())

    def bounds(self):
        return self.vertices.min(0), self.vertices.max(0)

    def compact(self) -> "TriangleMesh":
        """Drop zero-area triangles and unreferenced vertices."""
        tris = self.triangles
        if len(tris):
            tris = tris[self.areas() > 1e-15]
        used = np.unique(tris)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[tris])

    def components(self) -> np.ndarray:
        """Connected-component label per triangle (via shared vertices)."""
        n = len(self.vertices)
        t = self.triangles
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return labels[t[:, 0]]

    def n_components(self) -> int:
        if self.is_empty:
            return 0
        return len(np.unique(self.components()))

    # -------------------------------------------------------------- PLY
    def save_ply(self, path) -> None:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(self.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(self.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        faces = np.zeros(len(self.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        faces["n"] = 3
        faces["i"] = self.triangles
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.vertices.astype("<f4").tobytes())
            fh.write(faces.tobytes())

    @classmethod
    def load_ply(cls, path) -> "TriangleMesh":
        raw = open(path, "rb").read()
        end = raw.index(b"end_header\n") + len(b"end_header\n")
        header = raw[:end].decode("ascii").splitlines()
        if "format binary_little_endian 1.0" not in header:
            raise ValueError(f"{path}: only binary little-endian PLY is supported")
        nv = nf = 0
        for line in header:
            if line.startswith("element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith("element face"):
                nf = int(line.split()[-1])
        verts = np.frombuffer(raw, dtype="<f4", count=nv * 3, offset=end).reshape(nv, 3)
        faces = np.frombuffer(raw, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=nf,
                              offset=end + nv * 12)
        if nf and (faces["n"] != 3).any():
            raise ValueError(f"{path}: only triangle faces are supported")
        return cls(verts.astype(float), faces["i"].astype(np.int64))


# ---------------------------------------------------------- density field

def sample_scene(scene: Scene, samples_per_gaussian: int = DEFAULT_SAMPLES_PER_GAUSSIAN,
                 rng_seed=None):
    """Draw points from every Gaussian; returns ``(points, density_at(points))``."""
    if not 1 <= samples_per_gaussian <= 1000:
        raise ValueError("samples_per_gaussian must lie in [1, 1000]")
    if len(scene) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    rng = np.random.default_rng(rng_seed)
    L = quat_to_rotmat(scene.quats) * scene.scales[:, None, :]
    z = rng.standard_normal((len(scene), samples_per_gaussian, 3))
    pts = scene.means[:, None, :] + np.einsum("nij,nsj->nsi", L, z)
    pts = pts.reshape(-1, 3)
    return pts, density_at(scene, pts)


def _precisions(scene: Scene):
    R = quat_to_rotmat(scene.quats)
    inv_s2 = np.exp(-2 * scene.log_scales)
    return (R * inv_s2[:, None, :]) @ np.swapaxes(R, 1, 2)


def density_at(scene: Scene, x, cutoff_sigma: float | None = DENSITY_CUTOFF_SIGMA):
    """Opacity-weighted Gaussian mixture at points ``x`` (3,) or (N, 3).

    Each Gaussian only contributes where its Mahalanobis distance is within
    ``cutoff_sigma``; ``None`` sums every Gaussian everywhere.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    out = np.zeros(len(pts))
    if len(scene) == 0:
        return float(out[0]) if single else out
    prec = _precisions(scene)
    o = scene.opacities
    lim = math.inf if cutoff_sigma is None else cutoff_sigma ** 2
    chunk = max(1, 2_000_000 // max(len(scene), 1))
    for s in range(0, len(pts), chunk):
        d = pts[s:s + chunk, None, :] - scene.means[None]
        m = np.einsum("pki,kij,pkj->pk", d, prec, d)
        out[s:s + chunk] = np.sum(np.where(m <= lim, o * np.exp(-0.5 * m), 0.0), axis=1)
    return float(out[0]) if single else out


@dataclass
class DensityGrid:
    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")


def density_grid(scene: Scene, lo, hi, voxel_size: float,
                 cutoff_sigma: float = DENSITY_CUTOFF_SIGMA) -> DensityGrid:
    """Evaluate the density on a regular grid, each Gaussian only within its bound."""
    lo = np.asarray(lo, dtype=float)
    dims = np.maximum(np.ceil((np.asarray(hi) - lo) / voxel_size).astype(int) + 1, 2)
    vals = np.zeros(int(np.prod(dims)))
    if len(scene):
        prec = _precisions(scene)
        sd = np.sqrt(np.einsum("nii->ni", scene.covariances()))
        blo = np.clip(np.floor((scene.means - cutoff_sigma * sd - lo) / voxel_size), 0, dims - 1).astype(int)
        bhi = np.clip(np.ceil((scene.means + cutoff_sigma * sd - lo) / voxel_size), 0, dims - 1).astype(int)
        ext = bhi - blo + 1
        counts = ext.prod(1)
        o = scene.opacities
        lim = cutoff_sigma ** 2
        # process Gaussians in batches with a ragged expansion of their boxes
        start = 0
        while start < len(scene):
            stop = start
            total = 0
            while stop < len(scene) and (total == 0 or total + counts[stop] <= 4_000_000):
                total += counts[stop]
                stop += 1
            c = counts[start:stop]
            owner = np.repeat(np.arange(start, stop), c)
            local = np.arange(owner.size) - np.repeat(np.cumsum(c) - c, c)
            e = ext[owner]
            ix = blo[owner, 0] + local // (e[:, 1] * e[:, 2])
            iy = blo[owner, 1] + (local // e[:, 2]) % e[:, 1]
            iz = blo[owner, 2] + local % e[:, 2]
            p = lo + voxel_size * np.stack([ix, iy, iz], -1)
            d = p - scene.means[owner]
            m = np.einsum("pi,pij,pj->p", d, prec[owner], d)
            w = np.where(m <= lim, o[owner] * np.exp(-0.5 * m), 0.0)
            flat = (ix * dims[1] + iy) * dims[2] + iz
            vals += np.bincount(flat, weights=w, minlength=vals.size)
            start = stop
    return DensityGrid(lo, voxel_size, vals.reshape(dims))


def extract_mesh(scene: Scene, voxel_size: float, iso_level: float = DEFAULT_ISO,
                 samples_per_gaussian: int = DEFAULT_SAMPLES_PER_GAUSSIAN, rng_seed=0,
                 min_component: int = DEFAULT_MIN_COMPONENT) -> TriangleMesh:
    """Marching cubes on the density field over the padded box of sampled points."""
    if not voxel_size > 0 or not iso_level > 0:
        raise ValueError("voxel_size and iso_level must be positive")
    pts, _ = sample_scene(scene, samples_per_gaussian, rng_seed) if len(scene) else (np.zeros((0, 3)), None)
    if len(pts) == 0:
        return TriangleMesh()
    pad = 2 * voxel_size
    grid = density_grid(scene, pts.min(0) - pad, pts.max(0) + pad, voxel_size)
    v = grid.values
    if v.max() <= iso_level or v.min() >= iso_level:
        return TriangleMesh()
    # zero border so every level set closes
    padded = np.pad(v, 1, constant_values=0.0)
    verts, faces, _, _ = marching_cubes(padded, level=iso_level, spacing=(voxel_size,) * 3,
                                        allow_degenerate=False)
    verts = verts + grid.origin - voxel_size
    mesh = TriangleMesh(verts, faces).compact()
    if min_component > 0 and not mesh.is_empty:
        labels = mesh.components()
        sizes = np.bincount(labels)
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[sizes[labels] >= min_component]).compact()
    return mesh


# ----------------------------------------------------------- evaluation

def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def cloud_distances(a, b):
    """``(CD_l1, HD)`` between point clouds via nearest neighbours."""
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (d_ab.mean() + d_ba.mean()), max(d_ab.max(), d_ba.max())


def chamfer_hausdorff(pred: TriangleMesh, gt: TriangleMesh, n_points: int = 30000,
                      n_trials: int = 30, rng_seed=0):
    """RMS (over trials) symmetric Chamfer-l1 and max Hausdorff distance, in meters."""
    if pred.is_empty or gt.is_empty:
        raise ValueError("chamfer_hausdorff needs two non-empty meshes")
    rng = np.random.default_rng(rng_seed)
    cds, hds = [], []
    for _ in range(n_trials):
        a = sample_surface(pred, n_points, rng)
        b = sample_surface(gt, n_points, rng)
        cd, hd = cloud_distances(a, b)
        cds.append(cd)
        hds.append(hd)
    return float(np.sqrt(np.mean(np.square(cds)))), float(np.max(hds))


def kabsch(src, dst):
    """Least-squares rigid ``(R, t)`` mapping ``src`` onto ``dst``."""
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


@dataclass
class ICPResult:
    R: np.ndarray
    t: np.ndarray
    rms_initial: float
    rms_final: float
    iterations: int

    @property
    def diverged(self) -> bool:
        return self.rms_final > self.rms_initial


def icp(src, dst, max_iterations: int = 50, tol: float = 1e-6) -> ICPResult:
    """Point-to-point ICP aligning point set ``src`` to ``dst``."""
    tree = cKDTree(dst)
    R, t = np.eye(3), np.zeros(3)
    cur = np.asarray(src, dtype=float)
    d, idx = tree.query(cur)
    rms0 = prev = float(np.sqrt(np.mean(d ** 2)))
    it = 0
    for it in range(1, max_iterations + 1):
        dR, dt = kabsch(cur, dst[idx])
        cur = cur @ dR.T + dt
        R, t = dR @ R, dR @ t + dt
        d, idx = tree.query(cur)
        rms = float(np.sqrt(np.mean(d ** 2)))
        if abs(prev - rms) < tol:
            prev = rms
            break
        prev = rms
    return ICPResult(R, t, rms0, prev, it)


def align_and_crop(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = 5000,
                   rng_seed=0, return_icp: bool = False):
    """ICP-align ``pred`` to ``gt`` then drop triangles fully outside gt's padded box."""
    if pred.is_empty or gt.is_empty:
        raise ValueError("align_and_crop needs two non-empty meshes")
    rng = np.random.default_rng(rng_seed)
    src = sample_surface(pred, n_samples, rng)
    dst = sample_surface(gt, n_samples, rng)
    res = icp(src, dst)
    if res.diverged:
        log.warning("ICP diverged: rms %.4g -> %.4g", res.rms_initial, res.rms_final)
    moved = pred.transformed(res.R, res.t)
    lo, hi = gt.bounds()
    pad = 0.05 * (hi - lo)
    inside = np.all((moved.vertices >= lo - pad) & (moved.vertices <= hi + pad), axis=1)
    keep = inside[moved.triangles].any(axis=1)
    out = TriangleMesh(moved.vertices, moved.triangles[keep]).compact()
    if out.is_empty:
        log.warning("cropped prediction is empty")
    return (out, res) if return_icp else out
