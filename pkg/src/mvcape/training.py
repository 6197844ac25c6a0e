"""Training loop around :func:`mvcape.diffusion.training_step`."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen import Dataset, sample_batch
from .diffusion import NoiseSchedule, training_step
from .model import ModelConfig, MultiViewModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    n_refs: int = 3
    n_targets: int = 3
    lr: float = 1e-3
    min_lr: float = 1e-4
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    ema_decay: float = 0.995
    seed: int = 0
    T: int = 1000
    t_shift: float = 1.0  # timestep skew toward high noise; 1 is uniform


@dataclass
class TrainResult:
    model: MultiViewModel  # EMA weights
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * min(1.0, frac)))


def train(
    ds: Dataset,
    model_cfg: ModelConfig | None = None,
    cfg: TrainConfig | None = None,
    model: MultiViewModel | None = None,
    callback=None,
) -> TrainResult:
    """Train from scratch (or continue ``model``). ``callback(step, loss, model)`` runs every step."""
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    model = model or MultiViewModel(model_cfg or ModelConfig())
    ema = copy.deepcopy(model).eval()
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    schedule = NoiseSchedule(cfg.T)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    result = TrainResult(ema)
    t0 = time.perf_counter()
    model.train()
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, cfg)
        batch = sample_batch(ds, cfg.n_refs, cfg.n_targets, rng, batch_size=cfg.batch_size)
        loss = training_step(model, batch, schedule, gen, cfg.t_shift)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        decay = min(cfg.ema_decay, (1 + step) / (10 + step))
        with torch.no_grad():
            for pe, pm in zip(ema.parameters(), model.parameters()):
                pe.lerp_(pm, 1.0 - decay)
        result.losses.append(loss.item())
        if callback is not None:
            callback(step, result.losses[-1], model)
        if step % 100 == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss.item(), lr_at(step, cfg))
    result.seconds = time.perf_counter() - t0
    return result
