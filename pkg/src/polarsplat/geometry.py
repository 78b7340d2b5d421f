"""Sensor intrinsics, poses, and the Cartesian -> spherical -> polar-image maps.

Image coordinates are continuous: pixel ``(i, j)`` covers
``u in [i, i+1)`` along range and ``v in [j, j+1)`` along azimuth, so pixel
centers sit at half offsets. ``u = r / eps_r`` and ``v = (theta - theta_min) / eps_a``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

# Low-pass regularizer added to the projected 2x2 covariance (pixels^2).
BLUR_PX2 = 0.3

_DEGENERATE_EPS = 1e-12


class GeometryError(ValueError):
    """Raised for inputs where a coordinate map or its Jacobian is singular."""


@dataclass(frozen=True)
class SonarIntrinsics:
    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float
    r_max: float
    n_range: int
    n_azimuth: int
    n_elevation: int | None = None

    def __post_init__(self):
        if not self.theta_min < self.theta_max:
            raise ValueError("theta_min must be < theta_max")
        if not self.phi_min < self.phi_max:
            raise ValueError("phi_min must be < phi_max")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")
        if self.n_range < 1 or self.n_azimuth < 1:
            raise ValueError("bin counts must be >= 1")
        if self.n_elevation is None:
            # square angular pixels on the azimuth/elevation plane
            n_e = math.ceil((self.phi_max - self.phi_min) / self.eps_a - 1e-9)
            object.__setattr__(self, "n_elevation", max(1, n_e))
        elif self.n_elevation < 1:
            raise ValueError("n_elevation must be >= 1")

    @property
    def eps_r(self) -> float:
        return self.r_max / self.n_range

    @property
    def eps_a(self) -> float:
        return (self.theta_max - self.theta_min) / self.n_azimuth

    @property
    def eps_e(self) -> float:
        return (self.phi_max - self.phi_min) / self.n_elevation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_range, self.n_azimuth)

    @classmethod
    def from_fov(cls, horizontal_fov_deg, vertical_fov_deg, max_range_m,
                 n_range, n_azimuth, n_elevation=None) -> "SonarIntrinsics":
        h = math.radians(horizontal_fov_deg) / 2
        v = math.radians(vertical_fov_deg) / 2
        return cls(-h, h, -v, v, float(max_range_m), int(n_range), int(n_azimuth),
                   None if n_elevation is None else int(n_elevation))

    def to_dict(self) -> dict:
        return {
            "horizontal_fov_deg": math.degrees(self.theta_max - self.theta_min),
            "vertical_fov_deg": math.degrees(self.phi_max - self.phi_min),
            "max_range_m": self.r_max,
            "n_range": self.n_range,
            "n_azimuth": self.n_azimuth,
            "n_elevation": self.n_elevation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SonarIntrinsics":
        return cls.from_fov(d["horizontal_fov_deg"], d["vertical_fov_deg"],
                            d["max_range_m"], d["n_range"], d["n_azimuth"],
                            d.get("n_elevation"))

    @classmethod
    def load(cls, path) -> "SonarIntrinsics":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Range (m) and azimuth (rad) at the pixel centers."""
        r = (np.arange(self.n_range) + 0.5) * self.eps_r
        theta = self.theta_min + (np.arange(self.n_azimuth) + 0.5) * self.eps_a
        return r, theta


# ---------------------------------------------------------------- quaternions

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    The input is normalized first.
    """
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single 3x3 matrix; returns w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True)
class Pose:
    """Sensor-to-world rigid transform. ``rotation`` is a unit (w, x, y, z) quaternion."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(rotmat_to_quat(R), np.asarray(t, dtype=float))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Sensor at ``position`` with its forward (+x) axis pointing at ``target``."""
        position = np.asarray(position, dtype=float)
        fwd = np.asarray(target, dtype=float) - position
        fwd /= np.linalg.norm(fwd)
        left = np.cross(np.asarray(up, dtype=float), fwd)
        left /= np.linalg.norm(left)
        upv = np.cross(fwd, left)
        return cls.from_matrix(np.column_stack([fwd, left, upv]), position)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def inverse(self) -> "Pose":
        q = self.rotation * np.array([1.0, -1, -1, -1])
        return Pose(q, -(quat_to_rotmat(q) @ self.translation))

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(quat_multiply(self.rotation, other.rotation),
                    self.R @ other.translation + self.translation)

    def to_world(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.R.T + self.translation

    def to_sensor(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.translation) @ self.R

    def to_dict(self, frame_id=None) -> dict:
        d = {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}
        if frame_id is not None:
            d = {"id": frame_id, **d}
        return d


class SphericalPoint(NamedTuple):
    r: float
    theta: float
    phi: float


# --------------------------------------------------------- coordinate maps

def cartesian_to_spherical(p) -> SphericalPoint:
    x, y, z = np.asarray(p, dtype=float).reshape(3)
    r = math.sqrt(x * x + y * y + z * z)
    if r < _DEGENERATE_EPS:
        raise GeometryError("spherical coordinates are undefined at the origin")
    return SphericalPoint(r, math.atan2(y, x), math.atan2(z, math.hypot(x, y)))


def spherical_to_cartesian(s) -> np.ndarray:
    r, theta, phi = s
    c = math.cos(phi)
    return np.array([r * c * math.cos(theta), r * c * math.sin(theta), r * math.sin(phi)])


def cartesian_to_spherical_batch(p) -> np.ndarray:
    """Vectorized (N, 3) -> (N, 3) of (r, theta, phi); no degeneracy checks."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    return np.stack([np.sqrt(rho * rho + z * z), np.arctan2(y, x), np.arctan2(z, rho)], -1)


def spherical_to_cartesian_batch(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    r, th, ph = s[..., 0], s[..., 1], s[..., 2]
    c = np.cos(ph)
    return np.stack([r * c * np.cos(th), r * c * np.sin(th), r * np.sin(ph)], -1)


def spherical_jacobian_batch(p) -> np.ndarray:
    """(N, 3) points -> (N, 3, 3) Jacobians d(r, theta, phi)/d(x, y, z)."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho2 = x * x + y * y
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    r = np.sqrt(r2)
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([x / r, y / r, z / r], -1),
        np.stack([-y / rho2, x / rho2, zero], -1),
        np.stack([-x * z / (r2 * rho), -y * z / (r2 * rho), rho / r2], -1),
    ], -2)


def spherical_jacobian(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(3)
    if p @ p <= _DEGENERATE_EPS or p[0] ** 2 + p[1] ** 2 <= _DEGENERATE_EPS:
        raise GeometryError("spherical Jacobian is singular on the z-axis")
    return spherical_jacobian_batch(p[None])[0]


def transform_covariance(cov, J) -> np.ndarray:
    """Congruence ``J cov J^T``, symmetrized."""
    out = np.asarray(J) @ np.asarray(cov) @ np.swapaxes(np.asarray(J), -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def spherical_to_pixel(r, theta, intr: SonarIntrinsics):
    """Continuous (u, v) image coordinates of range ``r`` and azimuth ``theta``."""
    return np.asarray(r) / intr.eps_r, (np.asarray(theta) - intr.theta_min) / intr.eps_a


def project_to_image(mu_s, cov_s, intr: SonarIntrinsics, blur: float = BLUR_PX2):
    """Project a spherical mean/covariance into (range, azimuth) pixel space.

    Returns ``(mean2, cov2)``; ``cov2`` is the leading 2x2 block scaled per axis
    and regularized by ``blur`` on the diagonal.
    """
    r, theta = mu_s[0], mu_s[1]
    u, v = spherical_to_pixel(r, theta, intr)
    scale = np.array([1.0 / intr.eps_r, 1.0 / intr.eps_a])
    cov2 = np.asarray(cov_s)[:2, :2] * np.outer(scale, scale) + blur * np.eye(2)
    return np.array([u, v], dtype=float), cov2
