"""Toy multi-view denoiser and reference-view encoder.

Images enter the network as (B, V, 3, H, W) in [-1, 1]. Poses enter only
through CaPE blocks inside the attention layers.

Checkpoint layout ("CAPEMDL1", little-endian)::

    magic      8 bytes  b"CAPEMDL1"
    cfg_len    u32      length of the config block
    config     utf-8    ``key=value`` lines (see ModelConfig.to_text)
    count      u32      number of tensors
    per tensor:
      name_len u32, name bytes (utf-8), rank u32, dims u32 x rank,
      data     f32 x prod(dims)
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CrossAttentionBlock, SelfAttentionBlock, ViewTokens
from .cape import CapeConfig, Mode, RadiusVariant, Role, batch_blocks
from .pose import RadiusBounds

CKPT_MAGIC = b"CAPEMDL1"


PREDICTIONS = ("v", "eps")


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 32
    base_channels: int = 32
    dim: int = 64
    heads: int = 4
    cape: CapeConfig = field(default_factory=CapeConfig)
    prediction: str = "v"  # network target: "v" (velocity) or "eps" (noise)

    def __post_init__(self) -> None:
        if self.prediction not in PREDICTIONS:
            raise ValueError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")
        if self.image_side % 8:
            raise ValueError(f"image side must be divisible by 8, got {self.image_side}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        self.cape.check_dim(self.dim // self.heads)

    @property
    def tokens_per_reference(self) -> int:
        return (self.image_side // 8) ** 2

    def to_text(self) -> str:
        c = self.cape
        rows = {
            "image_side": self.image_side,
            "base_channels": self.base_channels,
            "dim": self.dim,
            "heads": self.heads,
            "mode": c.mode.value,
            "r_min": repr(c.bounds.r_min),
            "r_max": repr(c.bounds.r_max),
            "s": repr(c.s),
            "radius_variant": c.radius_variant.value,
            "prediction": self.prediction,
        }
        return "".join(f"{k}={v}\n" for k, v in rows.items())

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        cape = CapeConfig(
            Mode(kv["mode"]),
            RadiusBounds(float(kv["r_min"]), float(kv["r_max"])),
            float(kv["s"]),
            RadiusVariant(kv["radius_variant"]),
        )
        return cls(
            int(kv["image_side"]),
            int(kv["base_channels"]),
            int(kv["dim"]),
            int(kv["heads"]),
            cape,
            kv.get("prediction", "eps"),
        )


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def sincos_2d(side: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine grid codes, (side*side, dim); half the channels per axis."""
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float64) / max(1, quarter))
    pos = torch.arange(side, dtype=torch.float64)
    ang = pos[:, None] * freqs[None] * (math.pi / 2)
    axis = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (side, dim/2)
    ys = axis[:, None, :].expand(side, side, -1)
    xs = axis[None, :, :].expand(side, side, -1)
    out = torch.zeros(side, side, dim, dtype=torch.float64)
    out[..., : 2 * quarter] = ys
    out[..., 2 * quarter : 4 * quarter] = xs
    return out.reshape(side * side, dim).float()


def _fan_in_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.uniform_(m.bias, -bound, bound)


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class MultiViewAttention(nn.Module):
    """Self-attention over all target views, then cross-attention to references."""

    def __init__(self, dim: int, tokens: int, cfg: ModelConfig):
        super().__init__()
        self.pos = nn.Parameter(sincos_2d(math.isqrt(tokens), dim))
        self.self_attn = SelfAttentionBlock(dim, cfg.heads, cfg.cape)
        self.cross_attn = CrossAttentionBlock(dim, cfg.heads, cfg.cape)

    def forward(self, h, B, tgt_blocks, ctx, ctx_blocks):
        BV, C, H, W = h.shape
        x = h.reshape(B, BV // B, C, H * W).transpose(-1, -2) + self.pos
        x = self.self_attn(x, tgt_blocks)
        x = self.cross_attn(x, tgt_blocks, ctx, ctx_blocks)
        return (x - self.pos).transpose(-1, -2).reshape(BV, C, H, W)


class ConditioningEncoder(nn.Module):
    """Three stride-2 conv stages: (3, H, W) -> (H/8 * W/8, dim) tokens.

    The image is the only input; poses are attached later in attention.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.stages = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, c, 4, stride=2, padding=1),
            nn.GroupNorm(_groups(c), c),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.GroupNorm(_groups(2 * c), 2 * c),
            nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 4, stride=2, padding=1),
            nn.GroupNorm(_groups(2 * c), 2 * c),
            nn.SiLU(),
        )
        self.pos = nn.Parameter(sincos_2d(cfg.image_side // 8, 2 * c))
        self.proj = nn.Linear(2 * c, cfg.dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, N, 3, H, W) -> tokens (B, N, T, dim)."""
        B, N = images.shape[:2]
        f = self.stages(images.flatten(0, 1))
        tok = f.flatten(2).transpose(1, 2) + self.pos
        return self.proj(tok).reshape(B, N, -1, self.proj.out_features)


class Denoiser(nn.Module):
    """U-Net over target views: 32 -> 16 -> 8 -> 4 with attention at 8 and 4."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.base_channels, cfg.dim
        s = cfg.image_side
        temb = 4 * c
        self.temb_dim = c
        self.time_mlp = nn.Sequential(nn.Linear(c, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(3, c, 3, padding=1)
        self.down0 = ResBlock(c, c, temb)
        self.pool0 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)  # s/2
        self.down1 = ResBlock(2 * c, 2 * c, temb)
        self.pool1 = nn.Conv2d(2 * c, d, 3, stride=2, padding=1)  # s/4
        self.down2 = ResBlock(d, d, temb)
        self.attn2 = MultiViewAttention(d, (s // 4) ** 2, cfg)
        self.pool2 = nn.Conv2d(d, d, 3, stride=2, padding=1)  # s/8
        self.mid = ResBlock(d, d, temb)
        self.attn_mid = MultiViewAttention(d, (s // 8) ** 2, cfg)
        self.up2 = ResBlock(2 * d, d, temb)
        self.attn_up2 = MultiViewAttention(d, (s // 4) ** 2, cfg)
        self.up1 = ResBlock(d + 2 * c, 2 * c, temb)
        self.up0 = ResBlock(2 * c + c, c, temb)
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)
        _fan_in_init(self)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t, tgt_blocks: dict, ctx: torch.Tensor, ctx_blocks: dict):
        """x: (B, M, 3, H, W) noisy targets; t: (B,) timesteps shared by a scene's targets;
        ctx: (B, N, T, dim) reference tokens. Returns predicted noise (B, M, 3, H, W)."""
        B, M = x.shape[:2]
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))
        temb = temb.repeat_interleave(M, dim=0)
        h0 = self.down0(self.conv_in(x.flatten(0, 1)), temb)
        h1 = self.down1(self.pool0(h0), temb)
        h2 = self.down2(self.pool1(h1), temb)
        h2 = self.attn2(h2, B, tgt_blocks, ctx, ctx_blocks)
        h = self.mid(self.pool2(h2), temb)
        h = self.attn_mid(h, B, tgt_blocks, ctx, ctx_blocks)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up2(torch.cat([h, h2], 1), temb)
        h = self.attn_up2(h, B, tgt_blocks, ctx, ctx_blocks)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], 1), temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up0(torch.cat([h, h0], 1), temb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.reshape(x.shape)


class MultiViewModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = ConditioningEncoder(self.cfg)
        _fan_in_init(self.encoder)
        self.denoiser = Denoiser(self.cfg)

    def pose_blocks(self, poses: list[list], dtype=None) -> dict:
        """CaPE blocks for B lists of V poses: {role: (B, V, k, k)}."""
        dtype = dtype or next(self.parameters()).dtype
        per = [batch_blocks(row, self.cfg.cape, dtype) for row in poses]
        return {r: torch.stack([p[r] for p in per]) for r in (Role.KEY, Role.QUERY)}

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        side = self.cfg.image_side
        if images.shape[-3:] != (3, side, side):
            raise ValueError(f"expected images of shape (..., 3, {side}, {side}), got {tuple(images.shape)}")
        return self.encoder(images)

    def encode_references(self, images, poses) -> list[ViewTokens]:
        """One token set per reference view; images (N, 3, H, W) in [-1, 1]."""
        if len(poses) < 1 or len(poses) != len(images):
            raise ValueError("need one pose per reference image and at least one reference")
        tok = self.encode(torch.as_tensor(images)[None])[0]
        return [ViewTokens(t, p, "reference") for t, p in zip(tok, poses)]

    def forward(self, x_t, t, tgt_poses, ref_tokens, ref_poses):
        """Batched prediction (v or eps per ``cfg.prediction``); poses given as B lists of views."""
        side = self.cfg.image_side
        if x_t.shape[-3:] != (3, side, side):
            raise ValueError(f"expected targets of shape (B, M, 3, {side}, {side}), got {tuple(x_t.shape)}")
        tb = self.pose_blocks(tgt_poses, x_t.dtype)
        rb = self.pose_blocks(ref_poses, x_t.dtype)
        return self.denoiser(x_t, t, tb, ref_tokens, rb)

    def denoise(self, noisy_targets, t: int, references: list[ViewTokens], target_poses: list):
        """Single-scene prediction; noisy_targets (M, 3, H, W)."""
        if len(target_poses) < 1 or len(target_poses) != len(noisy_targets):
            raise ValueError("need one pose per target image and at least one target")
        ctx = torch.stack([r.tokens for r in references])[None]
        tt = torch.full((1,), int(t), dtype=torch.long)
        return self.forward(torch.as_tensor(noisy_targets)[None], tt, [list(target_poses)], ctx,
                            [[r.pose for r in references]])[0]


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, model: MultiViewModel) -> None:
    cfg = model.cfg.to_text().encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str | os.PathLike) -> MultiViewModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a CAPEMDL1 checkpoint")
    off = 8
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = ModelConfig.from_text(raw[off : off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        state[name] = torch.from_numpy(arr.copy())
    model = MultiViewModel(cfg)
    model.load_state_dict(state)
    return model


def with_cape(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, cape=replace(cfg.cape, **changes))
