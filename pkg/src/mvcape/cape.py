"""Camera positional encoding (CaPE).

A pose is turned into a small block ``psi`` (8x8 for 4 DoF, 4x4 for 6 DoF)
and a token feature ``v`` is transformed as ``v.reshape(-1, k) @ psi``, i.e.
the row-vector convention. The full d x d block-diagonal matrix is never built
except by :func:`cape_matrix`, which exists for gradient checks.

With the row convention, a 6 DoF key/query pair gives the logit
``k^T P_k P_q^{-1} q``: it depends on the poses only through ``P_k P_q^{-1}``,
which is unchanged when every pose is right-multiplied by a common transform
(a change of world frame for world-to-camera extrinsics).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch
from numpy.typing import ArrayLike, NDArray

from .pose import Pose4, Pose6, RadiusBounds, normalize_radius

Pose = Union[Pose4, Pose6]


class Mode(str, enum.Enum):
    FOUR_DOF = "4dof"
    SIX_DOF = "6dof"


class Role(str, enum.Enum):
    KEY = "key"
    QUERY = "query"


class RadiusVariant(str, enum.Enum):
    NORMALIZED = "normalized"  # pi * (log r - log r_min) / (log r_max - log r_min)
    LOG_SCALED = "log_scaled"  # s * log r


@dataclass(frozen=True)
class CapeConfig:
    mode: Mode = Mode.FOUR_DOF
    bounds: RadiusBounds = field(default_factory=RadiusBounds)
    s: float = 0.001
    radius_variant: RadiusVariant = RadiusVariant.NORMALIZED

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "radius_variant", RadiusVariant(self.radius_variant))
        if not (math.isfinite(self.s) and self.s > 0.0):
            raise ValueError(f"translation scale s must be > 0, got {self.s}")

    @property
    def block(self) -> int:
        """Width of one ``psi`` block; feature dims must be a multiple of it."""
        return 8 if self.mode is Mode.FOUR_DOF else 4

    def check_dim(self, d: int) -> None:
        if d <= 0 or d % self.block:
            raise ValueError(f"{self.mode.value} CaPE needs a feature dimension divisible by {self.block}, got {d}")


def rotation_2x2(theta: float) -> NDArray[np.float64]:
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def angles_4dof(pose: Pose4, cfg: CapeConfig) -> NDArray[np.float64]:
    """Block rotation angles ``(azimuth, elevation, roll, radius angle)``."""
    if cfg.radius_variant is RadiusVariant.LOG_SCALED:
        r_angle = cfg.s * np.log(pose.radius)
    else:
        r_angle = normalize_radius(pose.radius, cfg.bounds)
    return np.array([pose.azimuth, pose.elevation, pose.roll, r_angle], dtype=np.float64)


def psi_from_angles(angles: ArrayLike) -> NDArray[np.float64]:
    """8x8 block-diagonal matrix of four 2x2 rotations."""
    angles = np.asarray(angles, dtype=np.float64).reshape(4)
    psi = np.zeros((8, 8))
    for i, theta in enumerate(angles):
        psi[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = rotation_2x2(theta)
    return psi


def scaled_pose_matrix(pose: Pose6, s: float) -> NDArray[np.float64]:
    m = pose.matrix
    m[:3, 3] *= s
    return m


def psi_6dof(pose: Pose6, role: Role, cfg: CapeConfig) -> NDArray[np.float64]:
    m = scaled_pose_matrix(pose, cfg.s)
    if Role(role) is Role.KEY:
        return m
    # np.linalg.inv keeps the numpy path bit-identical to the numpy oracle;
    # the batched torch path uses the closed-form SE(3) inverse instead.
    return np.linalg.inv(m).T


def cape_block(pose: Pose, cfg: CapeConfig, role: Role = Role.KEY) -> NDArray[np.float64]:
    """The per-pose block ``psi`` (role only matters for 6 DoF)."""
    if cfg.mode is Mode.FOUR_DOF:
        if not isinstance(pose, Pose4):
            raise TypeError(f"4dof CaPE expects a Pose4, got {type(pose).__name__}")
        return psi_from_angles(angles_4dof(pose, cfg))
    if not isinstance(pose, Pose6):
        raise TypeError(f"6dof CaPE expects a Pose6, got {type(pose).__name__}")
    return psi_6dof(pose, role, cfg)


def apply_block(v: ArrayLike, psi: NDArray[np.float64]) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    k = psi.shape[0]
    if v.ndim != 1 or v.size % k:
        raise ValueError(f"feature vector of size {v.size} is not divisible by {k}")
    return v.reshape(-1, k).dot(psi).reshape(-1)


def apply_cape_4dof(v: ArrayLike, pose: Pose4, cfg: CapeConfig) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0 or v.size % 8:
        raise ValueError(f"4dof CaPE needs a dimension divisible by 8, got {v.shape}")
    if not isinstance(pose, Pose4):
        raise TypeError(f"4dof CaPE expects a Pose4, got {type(pose).__name__}")
    return apply_block(v, psi_from_angles(angles_4dof(pose, cfg)))


def apply_cape_6dof(v: ArrayLike, pose: Pose6, role: Role, cfg: CapeConfig) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0 or v.size % 4:
        raise ValueError(f"6dof CaPE needs a dimension divisible by 4, got {v.shape}")
    if not isinstance(pose, Pose6):
        raise TypeError(f"6dof CaPE expects a Pose6, got {type(pose).__name__}")
    return apply_block(v, psi_6dof(pose, role, cfg))


def apply_cape(v: ArrayLike, pose: Pose, cfg: CapeConfig, role: Role = Role.KEY) -> NDArray[np.float64]:
    if cfg.mode is Mode.FOUR_DOF:
        return apply_cape_4dof(v, pose, cfg)
    return apply_cape_6dof(v, pose, role, cfg)


def cape_pair_logit(q: ArrayLike, k: ArrayLike, pq: Pose, pk: Pose, cfg: CapeConfig) -> float:
    """Un-scaled attention logit between one query token and one key token."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    return float(apply_cape(k, pk, cfg, Role.KEY) @ apply_cape(q, pq, cfg, Role.QUERY))


def cape_matrix(pose: Pose, cfg: CapeConfig, d: int, role: Role = Role.KEY) -> NDArray[np.float64]:
    """Dense d x d matrix J with ``apply_cape(v) == J @ v`` (its Jacobian in v)."""
    cfg.check_dim(d)
    psi = cape_block(pose, cfg, role)
    return np.kron(np.eye(d // psi.shape[0]), psi.T)


# -- batched torch path --------------------------------------------------------


def se3_inverse_transpose(m: torch.Tensor) -> torch.Tensor:
    """Closed-form ``inv(m).T`` for a batch of homogeneous SE(3) matrices."""
    R = m[..., :3, :3]
    t = m[..., :3, 3:]
    out = torch.zeros_like(m)
    out[..., :3, :3] = R
    out[..., 3:, :3] = -(R.transpose(-1, -2) @ t).transpose(-1, -2)
    out[..., 3, 3] = 1.0
    return out


def batch_blocks(poses: list, cfg: CapeConfig, dtype=torch.float64) -> dict[Role, torch.Tensor]:
    """Stack key and query blocks for a list of poses, shape (V, k, k) each."""
    if cfg.mode is Mode.FOUR_DOF:
        psi = torch.as_tensor(np.stack([cape_block(p, cfg) for p in poses]), dtype=torch.float64)
        return {Role.KEY: psi.to(dtype), Role.QUERY: psi.to(dtype)}
    m = torch.as_tensor(np.stack([scaled_pose_matrix(p, cfg.s) for p in poses]), dtype=torch.float64)
    return {Role.KEY: m.to(dtype), Role.QUERY: se3_inverse_transpose(m).to(dtype)}


def apply_blocks(x: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
    """Row-convention CaPE on a tensor.

    x: (..., T, d) features; psi: (..., k, k) blocks broadcast over T.
    """
    k = psi.shape[-1]
    *lead, T, d = x.shape
    if d % k:
        raise ValueError(f"feature dimension {d} is not divisible by block size {k}")
    rows = x.reshape(*lead, T * (d // k), k)
    return (rows @ psi).reshape(*lead, T, d)
