"""Forward noising, the denoising objective (v or epsilon target), and DDIM samplers."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .datagen import Batch
from .model import MultiViewModel
from .pose import Pose4, Pose6


class NoiseSchedule:
    """Cosine schedule; ``alpha_bar[t]`` for integer t in [0, T], alpha_bar[0] == 1."""

    def __init__(self, T: int = 1000, offset: float = 0.008, max_beta: float = 0.999):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = T

        def f(t):
            return math.cos((t / T + offset) / (1.0 + offset) * math.pi / 2.0) ** 2

        ab = [1.0]
        for t in range(1, T + 1):
            beta = min(1.0 - f(t) / f(t - 1), max_beta)
            ab.append(ab[-1] * (1.0 - beta))
        self.alpha_bar = torch.tensor(ab, dtype=torch.float64)

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t.tolist()}")
        return t

    def sample_steps(self, steps: int) -> list[int]:
        """Descending timesteps from T to 0 (inclusive), ``steps`` transitions."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return [int(round(x)) for x in np.linspace(self.T, 0, steps + 1)]


def _bcast(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return a.to(x.dtype).reshape(-1, *([1] * (x.dim() - 1)))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` is a scalar or one value per leading row."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    if ab.dim() == 0:
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return _bcast(ab.sqrt(), x0) * x0 + _bcast((1.0 - ab).sqrt(), x0) * eps


def to_model_space(images) -> torch.Tensor:
    """(…, H, W, 3) in [0, 1] -> (…, 3, H, W) in [-1, 1]."""
    x = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    return x.movedim(-1, -3) * 2.0 - 1.0


def to_image_space(x: torch.Tensor) -> np.ndarray:
    return ((x.movedim(-3, -1).clamp(-1.0, 1.0) + 1.0) / 2.0).detach().cpu().numpy()


def velocity(x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """v = sqrt(ab_t) eps - sqrt(1 - ab_t) x0."""
    ab = schedule.alpha_bar[schedule.check_t(t)]
    return _bcast(ab.sqrt(), x0) * eps - _bcast((1.0 - ab).sqrt(), x0) * x0


def split_prediction(pred: torch.Tensor, x_t: torch.Tensor, a: float, prediction: str):
    """Recover (x0, eps) from a network output at noise level ``a`` = alpha_bar_t."""
    sa, sb = math.sqrt(a), math.sqrt(1.0 - a)
    if prediction == "v":
        return sa * x_t - sb * pred, sb * x_t + sa * pred
    return (x_t - sb * pred) / sa, pred


class NonFiniteLoss(FloatingPointError):
    pass


def sample_timesteps(count: int, schedule: NoiseSchedule, generator=None, shift: float = 1.0) -> torch.Tensor:
    """Training timesteps in [1, T]. ``shift`` > 1 moves mass toward high noise
    via u -> s u / (1 + (s - 1) u); 1 keeps them uniform."""
    if shift <= 0:
        raise ValueError("shift must be positive")
    if shift == 1.0:
        return torch.randint(1, schedule.T + 1, (count,), generator=generator)
    u = torch.rand(count, generator=generator, dtype=torch.float64)
    u = shift * u / (1.0 + (shift - 1.0) * u)
    return (u * schedule.T).ceil().long().clamp(1, schedule.T)


def training_step(
    model: MultiViewModel,
    batch: Batch,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    shift: float = 1.0,
) -> torch.Tensor:
    """MSE against the configured target (v or noise); one shared t per scene."""
    dtype = next(model.parameters()).dtype
    x0 = to_model_space(batch.tgt_images).to(dtype)
    refs = to_model_space(batch.ref_images).to(dtype)
    B = x0.shape[0]
    t = sample_timesteps(B, schedule, generator, shift)
    eps = torch.randn(x0.shape, generator=generator, dtype=dtype)
    x_t = forward_noise(x0, t, eps, schedule)
    ctx = model.encode(refs)
    pred = model(x_t, t, batch.tgt_poses, ctx, batch.ref_poses)
    target = velocity(x0, eps, t, schedule) if model.cfg.prediction == "v" else eps
    loss = torch.mean((pred - target) ** 2)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()} at timesteps {t.tolist()}")
    return loss


# -- sampling ------------------------------------------------------------------


class SamplerMode(str, enum.Enum):
    DIRECT = "direct"
    AUTOREGRESSIVE = "autoregressive"


@dataclass(frozen=True)
class SamplerConfig:
    mode: SamplerMode = SamplerMode.DIRECT
    steps: int = 50
    deterministic: bool = True  # DDIM eta = 0; False gives eta = 1
    min_targets: int = 15
    pad: bool = True
    seed: int = 0
    guidance_scale: float = 1.0  # 1.0 disables guidance

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SamplerMode(self.mode))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.min_targets < 1:
            raise ValueError("min_targets must be >= 1")


def _pose_key(pose) -> bytes:
    return pose.as_array().astype("<f8").tobytes()


def pose_generator(seed: int, pose, stream: int = 0) -> torch.Generator:
    """Noise source tied to (seed, pose) so equal poses draw equal noise."""
    digest = hashlib.sha256(struct_seed(seed, stream) + _pose_key(pose)).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little") & ((1 << 63) - 1))
    return g


def struct_seed(seed: int, stream: int) -> bytes:
    return int(seed).to_bytes(8, "little", signed=True) + int(stream).to_bytes(4, "little")


def _pose_noise(seed, poses, shape, stream, dtype) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=pose_generator(seed, p, stream), dtype=dtype) for p in poses])


def pad_targets(poses: list, min_targets: int) -> list:
    """Cycle through the requested poses until at least ``min_targets`` are present."""
    if not poses:
        raise ValueError("need at least one target pose")
    out = list(poses)
    i = 0
    while len(out) < min_targets:
        out.append(poses[i % len(poses)])
        i += 1
    return out


@torch.no_grad()
def ddim_loop(
    model: MultiViewModel,
    ctx: torch.Tensor,
    ref_poses: list[list],
    tgt_poses: list[list],
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
) -> torch.Tensor:
    """Joint DDIM over B scenes; returns x0 in model space, shape (B, M, 3, H, W)."""
    dtype = ctx.dtype
    side = model.cfg.image_side
    shape = (3, side, side)
    x = torch.stack([_pose_noise(sampler.seed, row, shape, 0, dtype) for row in tgt_poses])
    tb = model.pose_blocks(tgt_poses, dtype)
    rb = model.pose_blocks(ref_poses, dtype)
    ab = schedule.alpha_bar
    steps = schedule.sample_steps(sampler.steps)
    B = x.shape[0]
    for i, (t, t_next) in enumerate(zip(steps[:-1], steps[1:])):
        tt = torch.full((B,), t, dtype=torch.long)
        pred = model.denoiser(x, tt, tb, ctx, rb)
        if sampler.guidance_scale != 1.0:
            pred_u = model.denoiser(x, tt, tb, torch.zeros_like(ctx), rb)
            pred = pred_u + sampler.guidance_scale * (pred - pred_u)
        a, a_next = float(ab[t]), float(ab[t_next])
        x0, _ = split_prediction(pred, x, a, model.cfg.prediction)
        x0 = x0.clamp(-1.0, 1.0)
        eps = (x - math.sqrt(a) * x0) / math.sqrt(1.0 - a)
        if sampler.deterministic or t_next == 0:
            x = math.sqrt(a_next) * x0 + math.sqrt(1.0 - a_next) * eps
        else:
            sigma = math.sqrt((1.0 - a_next) / (1.0 - a) * (1.0 - a / a_next))
            noise = torch.stack([_pose_noise(sampler.seed, row, shape, i + 1, dtype) for row in tgt_poses])
            x = math.sqrt(a_next) * x0 + math.sqrt(1.0 - a_next - sigma**2) * eps + sigma * noise
    return x


def _prepare(model, ref_images, ref_poses, target_poses):
    if len(ref_poses) < 1 or len(ref_images) != len(ref_poses):
        raise ValueError("need at least one reference view with one pose per image")
    if len(target_poses) < 1:
        raise ValueError("need at least one target pose")
    dtype = next(model.parameters()).dtype
    refs = to_model_space(ref_images).to(dtype)[None]
    return model.encode(refs)


@torch.no_grad()
def sample_direct(
    model: MultiViewModel,
    ref_images,
    ref_poses: list,
    target_poses: list,
    schedule: NoiseSchedule | None = None,
    sampler: SamplerConfig | None = None,
) -> np.ndarray:
    """Generate all targets jointly. Returns (M, H, W, 3) images in [0, 1].

    Fewer than ``min_targets`` requests are padded with duplicate poses; only
    the requested views are returned.
    """
    schedule = schedule or NoiseSchedule()
    sampler = sampler or SamplerConfig()
    ctx = _prepare(model, ref_images, ref_poses, target_poses)
    poses = pad_targets(target_poses, sampler.min_targets) if sampler.pad else list(target_poses)
    x = ddim_loop(model, ctx, [list(ref_poses)], [poses], schedule, sampler)
    return to_image_space(x[0, : len(target_poses)])


@torch.no_grad()
def sample_autoregressive(
    model: MultiViewModel,
    ref_images,
    ref_poses: list,
    target_poses: list,
    schedule: NoiseSchedule | None = None,
    sampler: SamplerConfig | None = None,
    history: list | None = None,
) -> np.ndarray:
    """Generate targets one at a time, appending each result to the references.

    ``history``, if given, receives the reference count used for each target.
    """
    schedule = schedule or NoiseSchedule()
    sampler = sampler or SamplerConfig()
    _prepare(model, ref_images, ref_poses, target_poses)
    images = list(np.asarray(ref_images))
    poses = list(ref_poses)
    out = []
    for pose in target_poses:
        if history is not None:
            history.append(len(poses))
        img = sample_direct(model, np.stack(images), poses, [pose], schedule, sampler)[0]
        out.append(img)
        images.append(img)
        poses.append(pose)
    return np.stack(out)


def sample(model, ref_images, ref_poses, target_poses, schedule=None, sampler=None) -> np.ndarray:
    sampler = sampler or SamplerConfig()
    fn = sample_direct if sampler.mode is SamplerMode.DIRECT else sample_autoregressive
    return fn(model, ref_images, ref_poses, target_poses, schedule, sampler)


@torch.no_grad()
def sample_scenes(
    model: MultiViewModel,
    ref_images: np.ndarray,
    ref_poses: list[list],
    target_poses: list[list],
    schedule: NoiseSchedule | None = None,
    sampler: SamplerConfig | None = None,
) -> np.ndarray:
    """Direct sampling for B independent scenes at once (equal N and M per scene).

    Scenes are processed together, and each scene's result matches what
    :func:`sample_direct` returns for it alone.
    """
    schedule = schedule or NoiseSchedule()
    sampler = sampler or SamplerConfig()
    dtype = next(model.parameters()).dtype
    ctx = model.encode(to_model_space(ref_images).to(dtype))
    M = len(target_poses[0])
    padded = [pad_targets(row, sampler.min_targets) if sampler.pad else list(row) for row in target_poses]
    x = ddim_loop(model, ctx, [list(r) for r in ref_poses], padded, schedule, sampler)
    return to_image_space(x[:, :M])
