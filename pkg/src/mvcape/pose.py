"""Camera pose algebra: spherical 4 DoF poses and SE(3) 6 DoF poses.

Pose6 stores a world-to-camera extrinsic (x_cam = R x_world + t), so the
camera centre is -R^T t and a change of world frame G acts on the right,
P -> P G^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

TWO_PI = 2.0 * math.pi


def canonical_angle(theta: float, period: float = TWO_PI) -> float:
    """Reduce ``theta`` into the half-open range [0, period)."""
    out = math.fmod(float(theta), period)
    if out < 0.0:
        out += period
    # fmod + period can round up to exactly `period`
    if out >= period:
        out = 0.0
    return out


@dataclass(frozen=True)
class Pose4:
    """Object-centric spherical camera pose.

    ``elevation`` is the colatitude measured from +z, stored in [0, pi).
    """

    azimuth: float
    elevation: float
    roll: float
    radius: float

    def __post_init__(self) -> None:
        r = float(self.radius)
        if not (math.isfinite(r) and r > 0.0):
            raise ValueError(f"radius must be finite and > 0, got {self.radius!r}")
        object.__setattr__(self, "azimuth", canonical_angle(self.azimuth))
        object.__setattr__(self, "elevation", canonical_angle(self.elevation, math.pi))
        object.__setattr__(self, "roll", canonical_angle(self.roll))
        object.__setattr__(self, "radius", r)

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.azimuth, self.elevation, self.roll, self.radius], dtype=np.float64)

    @classmethod
    def from_array(cls, a: ArrayLike) -> Pose4:
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*map(float, a))

    def shifted(self, delta: float, scale: float = 1.0) -> Pose4:
        """Add ``delta`` to every angle and multiply the radius by ``scale``."""
        return Pose4(self.azimuth + delta, self.elevation + delta, self.roll + delta, self.radius * scale)


@dataclass(frozen=True)
class Pose6:
    """Rigid world-to-camera transform in SE(3)."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {t.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        det = np.linalg.det(R)
        if abs(det - 1.0) > 1e-6:
            raise ValueError(f"rotation must have det +1, got {det:.9f}")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose6:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> Pose6:
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (3, 4):
            return cls(m[:, :3], m[:, 3])
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 or 3x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("bottom row of a homogeneous transform must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_array(self) -> NDArray[np.float64]:
        """Row-major 3x4 flattening (12 values)."""
        return self.matrix[:3].reshape(12).copy()

    @classmethod
    def from_array(cls, a: ArrayLike) -> Pose6:
        return cls.from_matrix(np.asarray(a, dtype=np.float64).reshape(3, 4))

    @property
    def center(self) -> NDArray[np.float64]:
        return -self.rotation.T @ self.translation

    def __matmul__(self, other: Pose6) -> Pose6:
        return compose_6dof(self, other)


@dataclass(frozen=True)
class RadiusBounds:
    r_min: float = 1.5
    r_max: float = 4.0

    def __post_init__(self) -> None:
        lo, hi = float(self.r_min), float(self.r_max)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("radius bounds must be finite")
        if not (0.0 < lo < hi):
            raise ValueError(f"need 0 < r_min < r_max, got ({lo}, {hi})")
        object.__setattr__(self, "r_min", lo)
        object.__setattr__(self, "r_max", hi)


def relative_4dof(p1: Pose4, p2: Pose4) -> tuple[float, float, float, float]:
    """Relative 4 DoF transform ``(d_azimuth, d_elevation, d_roll, radius_ratio)``.

    Each angle difference is reduced into its component's canonical range
    (elevation therefore mod pi). The encoding itself rotates by the raw
    angle differences; see :func:`mvcape.cape.angles_4dof`.
    """
    return (
        canonical_angle(p1.azimuth - p2.azimuth),
        canonical_angle(p1.elevation - p2.elevation, math.pi),
        canonical_angle(p1.roll - p2.roll),
        p1.radius / p2.radius,
    )


def compose_6dof(p1: Pose6, p2: Pose6) -> Pose6:
    """Homogeneous product ``p1 @ p2``."""
    R = p1.rotation @ p2.rotation
    t = p1.rotation @ p2.translation + p1.translation
    return Pose6(R, t)


def inverse_6dof(p: Pose6) -> Pose6:
    Rt = p.rotation.T
    return Pose6(Rt, -Rt @ p.translation)


def normalize_radius(r: float, bounds: RadiusBounds) -> float:
    """Map a radius to a rotation angle, sending [r_min, r_max] onto [0, pi].

    Linear in log r and deliberately not clamped, so differences of the
    result are invariant to a common rescaling of both radii.
    """
    r = float(r)
    if not r > 0.0:
        raise ValueError(f"radius must be > 0, got {r}")
    lo = math.log(bounds.r_min)
    return math.pi * (math.log(r) - lo) / (math.log(bounds.r_max) - lo)


def sphere_point(p: Pose4) -> NDArray[np.float64]:
    """Offset of the camera centre from the look-at point."""
    sb = math.sin(p.elevation)
    return p.radius * np.array(
        [sb * math.cos(p.azimuth), sb * math.sin(p.azimuth), math.cos(p.elevation)]
    )


def look_at_rotation(center: ArrayLike, target: ArrayLike, roll: float = 0.0) -> NDArray[np.float64]:
    """World-to-camera rotation for a camera at ``center`` looking at ``target``.

    Camera axes follow the pinhole convention: +x right, +y down, +z forward.
    World +z is "up"; near the poles the up hint falls back to +y.
    """
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - center
    n = np.linalg.norm(fwd)
    if not n > 1e-12:
        raise ValueError("degenerate look-at: camera coincides with its target")
    fwd = fwd / n
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 1.0 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    if roll:
        c, s = math.cos(roll), math.sin(roll)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R
    return R


def spherical_to_se3(p: Pose4, look_at: ArrayLike = (0.0, 0.0, 0.0)) -> Pose6:
    """World-to-camera extrinsic of a camera orbiting ``look_at``."""
    target = np.asarray(look_at, dtype=np.float64).reshape(3)
    center = target + sphere_point(p)
    R = look_at_rotation(center, target, p.roll)
    return Pose6(R, -R @ center)


def se3_to_spherical(p: Pose6, look_at: ArrayLike = (0.0, 0.0, 0.0)) -> tuple[float, float, float]:
    """Recover ``(azimuth, elevation, radius)`` of the camera centre about ``look_at``."""
    rel = p.center - np.asarray(look_at, dtype=np.float64)
    r = float(np.linalg.norm(rel))
    if r == 0.0:
        raise ValueError("camera centre coincides with look-at point")
    beta = math.acos(max(-1.0, min(1.0, rel[2] / r)))
    alpha = canonical_angle(math.atan2(rel[1], rel[0]))
    return alpha, beta, r
