"""Self-contained invariant checks, runnable without data or checkpoints.

Each check returns a worst-case error (or 0/1 for exact checks) and passes
when that error is within its tolerance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .attention import CapeAttention, ViewTokens, cape_attention
from .cape import CapeConfig, Mode, Role, apply_cape, batch_blocks
from .diffusion import NoiseSchedule, SamplerConfig, forward_noise, sample_autoregressive, sample_direct
from .metrics import psnr, ssim
from .model import ModelConfig, MultiViewModel
from .pose import Pose4, Pose6, RadiusBounds, compose_6dof, inverse_6dof, se3_to_spherical, spherical_to_se3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44} err={self.error:.3e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)"


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose6(rng: np.random.Generator, max_t: float = 10.0) -> Pose6:
    d = rng.normal(size=3)
    return Pose6(random_rotation(rng), d / np.linalg.norm(d) * rng.uniform(0, max_t))


def random_pose4(rng: np.random.Generator, bounds: RadiusBounds = RadiusBounds()) -> Pose4:
    return Pose4(
        rng.uniform(0, 2 * math.pi),
        rng.uniform(0, math.pi),
        rng.uniform(0, 2 * math.pi),
        math.exp(rng.uniform(math.log(bounds.r_min), math.log(bounds.r_max))),
    )


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def check_pose_algebra(rng) -> float:
    err = 0.0
    for _ in range(200):
        p = random_pose6(rng)
        err = max(err, np.abs(compose_6dof(p, inverse_6dof(p)).matrix - np.eye(4)).max())
        s = Pose4(rng.uniform(0, 2 * math.pi), rng.uniform(0.2, 2.9), 0.0, rng.uniform(1.5, 4.0))
        az, el, r = se3_to_spherical(spherical_to_se3(s))
        d_az = abs((az - s.azimuth + math.pi) % (2 * math.pi) - math.pi)
        err = max(err, d_az, abs(el - s.elevation), abs(r - s.radius))
    return err


def check_cape4_relative(rng) -> float:
    cfg = CapeConfig(Mode.FOUR_DOF, RadiusBounds(1.5, 4.0))
    err = 0.0
    for _ in range(1000):
        q, k = rng.normal(size=(2, 32))
        p1, p2 = random_pose4(rng, cfg.bounds), random_pose4(rng, cfg.bounds)
        d, s = rng.uniform(-5, 5), math.exp(rng.uniform(-1, 1))
        shifted = [Pose4(p.azimuth + d, p.elevation, p.roll + d, p.radius * s) for p in (p1, p2)]
        a = float(apply_cape(k, p1, cfg) @ apply_cape(q, p2, cfg))
        b = float(apply_cape(k, shifted[0], cfg) @ apply_cape(q, shifted[1], cfg))
        err = max(err, _rel(a, b))
    return err


def check_cape4_norm(rng) -> float:
    cfg = CapeConfig(Mode.FOUR_DOF, RadiusBounds(1.5, 4.0))
    err = 0.0
    for _ in range(1000):
        v = rng.normal(size=64)
        err = max(err, abs(np.linalg.norm(apply_cape(v, random_pose4(rng), cfg)) - np.linalg.norm(v)))
    return err


def check_cape6_relative(rng) -> float:
    cfg = CapeConfig(Mode.SIX_DOF)
    err = 0.0
    for _ in range(1000):
        q, k = rng.normal(size=(2, 32))
        p1, p2, g = random_pose6(rng), random_pose6(rng), random_pose6(rng)
        a = float(apply_cape(k, p1, cfg, Role.KEY) @ apply_cape(q, p2, cfg, Role.QUERY))
        b = float(
            apply_cape(k, compose_6dof(p1, g), cfg, Role.KEY) @ apply_cape(q, compose_6dof(p2, g), cfg, Role.QUERY)
        )
        err = max(err, _rel(a, b))
    return err


def _views(rng, poses, d=32, T=4):
    return [ViewTokens(torch.as_tensor(rng.normal(size=(T, d))), p) for p in poses]


def check_attention_invariance(rng) -> float:
    err = 0.0
    for mode, make in ((Mode.FOUR_DOF, random_pose4), (Mode.SIX_DOF, random_pose6)):
        cfg = CapeConfig(mode)
        attn = CapeAttention(32, 2, cfg).double()
        qp, kp = [make(rng) for _ in range(2)], [make(rng) for _ in range(3)]
        if mode is Mode.FOUR_DOF:
            d, s = rng.uniform(-3, 3), math.exp(rng.uniform(-0.5, 0.5))
            moved = [Pose4(p.azimuth + d, p.elevation, p.roll + d, p.radius * s) for p in qp + kp]
        else:
            g = random_pose6(rng)
            moved = [compose_6dof(p, g) for p in qp + kp]
        xq = torch.as_tensor(rng.normal(size=(1, 2, 4, 32)))
        xk = torch.as_tensor(rng.normal(size=(1, 3, 4, 32)))
        l1 = attn.logits(xq, batch_blocks(qp, cfg)[Role.QUERY][None], xk, batch_blocks(kp, cfg)[Role.KEY][None])
        l2 = attn.logits(
            xq, batch_blocks(moved[:2], cfg)[Role.QUERY][None], xk, batch_blocks(moved[2:], cfg)[Role.KEY][None]
        )
        err = max(err, ((l1 - l2).abs() / l1.abs().clamp(min=1.0)).max().item())
    return err


def check_attention_permutation(rng) -> float:
    cfg = CapeConfig(Mode.FOUR_DOF)
    attn = CapeAttention(32, 2, cfg).double()
    q = _views(rng, [random_pose4(rng)])
    kv = _views(rng, [random_pose4(rng) for _ in range(5)])
    a = cape_attention(q, kv, attn)[0].tokens
    b = cape_attention(q, kv[::-1], attn)[0].tokens
    return 0.0 if torch.equal(a, b) else 1.0


def check_schedule(rng) -> float:
    sched = NoiseSchedule()
    ab = sched.alpha_bar
    if not bool(torch.all(ab[1:] < ab[:-1])) or ab[0] != 1.0:
        return 1.0
    g = torch.Generator().manual_seed(int(rng.integers(1 << 31)))
    x0 = torch.rand(100_000, generator=g, dtype=torch.float64) * 2 - 1
    err = 0.0
    for t in (100, 500, 900):
        xt = forward_noise(x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64), sched)
        a = ab[t].item()
        err = max(err, abs(xt.var().item() / (a * x0.var().item() + 1 - a) - 1))
    return err


def _tiny_model(mode: Mode) -> MultiViewModel:
    torch.manual_seed(0)
    m = MultiViewModel(ModelConfig(image_side=16, base_channels=8, dim=32, heads=2, cape=CapeConfig(mode))).eval()
    torch.nn.init.normal_(m.denoiser.conv_out.weight, std=0.1)
    return m


def check_model_invariance(rng) -> float:
    err = 0.0
    for mode in (Mode.FOUR_DOF, Mode.SIX_DOF):
        m = _tiny_model(mode)
        base = [Pose4(rng.uniform(0, 6.28), rng.uniform(0.6, 2.5), 0.0, rng.uniform(1.5, 4.0)) for _ in range(4)]
        if mode is Mode.FOUR_DOF:
            poses = base
            moved = [Pose4(p.azimuth + 1.3, p.elevation, p.roll + 1.3, p.radius * 1.2) for p in base]
        else:
            poses = [spherical_to_se3(p) for p in base]
            g = random_pose6(rng, 3.0)
            moved = [compose_6dof(p, g) for p in poses]
        refs = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)), dtype=torch.float32)
        x = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)), dtype=torch.float32)
        a = m.denoise(x, 600, m.encode_references(refs, poses[:2]), poses[2:])
        b = m.denoise(x, 600, m.encode_references(refs, moved[:2]), moved[2:])
        err = max(err, (a - b).abs().max().item())
    return err


def check_sampler(rng) -> float:
    """Reproducibility, target-permutation equivariance, autoregressive == direct at M=1 (all exact)."""
    m = _tiny_model(Mode.FOUR_DOF)
    sampler = SamplerConfig(steps=3, min_targets=3)
    refs = rng.random((2, 16, 16, 3)).astype(np.float32)
    rp = [random_pose4(rng) for _ in range(2)]
    tp = [random_pose4(rng) for _ in range(3)]
    a = sample_direct(m, refs, rp, tp, sampler=sampler)
    ok = a.tobytes() == sample_direct(m, refs, rp, tp, sampler=sampler).tobytes()
    perm = [2, 0, 1]
    ok &= np.array_equal(a[perm], sample_direct(m, refs, rp, [tp[i] for i in perm], sampler=sampler))
    one = sample_direct(m, refs, rp, tp[:1], sampler=sampler)
    ok &= one.tobytes() == sample_autoregressive(m, refs, rp, tp[:1], sampler=sampler).tobytes()
    return 0.0 if ok else 1.0


def check_metrics(rng) -> float:
    a = rng.random((32, 32, 3))
    b = np.full((16, 16, 3), 0.3)
    return max(abs(psnr(b, b + 0.1) - 20.0), abs(ssim(a, a) - 1.0))


CHECKS: list[tuple[str, Callable, float]] = [
    ("pose: SE(3) inverse and spherical round trip", check_pose_algebra, 1e-9),
    ("cape 4dof: shift/scale invariance (1000)", check_cape4_relative, 1e-9),
    ("cape 4dof: norm preservation (1000)", check_cape4_norm, 1e-12),
    ("cape 6dof: world-frame invariance (1000)", check_cape6_relative, 1e-9),
    ("attention: logits under global transform", check_attention_invariance, 1e-9),
    ("attention: key-view permutation exact", check_attention_permutation, 0.0),
    ("diffusion: schedule and variance law", check_schedule, 0.05),
    ("model: global transform, float32", check_model_invariance, 1e-5),
    ("sampler: reproducible, equivariant, AR@M=1", check_sampler, 0.0),
    ("metrics: closed-form PSNR/SSIM", check_metrics, 1e-12),
]


def run_checks(seed: int = 0, report=print) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        try:
            err = float(fn(rng))
        except Exception as exc:  # a crash counts as a failed property
            report(f"FAIL  {name}: {type(exc).__name__}: {exc}")
            err = math.inf
        res = CheckResult(name, err, tol, time.perf_counter() - t0)
        if math.isfinite(err):
            report(res.line())
        results.append(res)
    return results
