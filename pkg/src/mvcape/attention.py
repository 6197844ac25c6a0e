"""Multi-view scaled dot-product attention with CaPE on keys and queries.

Tensors are laid out as (B, V, T, d): batch of scenes, views, tokens per view,
feature dim. Each view carries one pose, passed as its CaPE blocks (B, V, k, k).

Reductions over key views are done per view and then summed in sorted order,
so reordering the key views gives bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .cape import CapeConfig, Pose, Role, apply_blocks, batch_blocks


@dataclass
class ViewTokens:
    tokens: torch.Tensor  # (T, d)
    pose: Pose
    role: str = "target"


@dataclass
class AttentionOutput:
    tokens: torch.Tensor  # (T, d)
    weights: Optional[torch.Tensor] = None  # (heads, T, total key tokens)


def _sorted_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    if x.shape[dim] == 1:
        return x.squeeze(dim)
    return torch.sort(x, dim=dim).values.sum(dim)


class CapeAttention(nn.Module):
    """Multi-head attention; CaPE is applied per head after the K/Q projections.

    Values are not pose-transformed.
    """

    def __init__(self, dim: int, heads: int, cfg: CapeConfig, kv_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        cfg.check_dim(dim // heads)
        self.dim, self.heads, self.cfg = dim, heads, cfg
        self.head_dim = dim // heads
        kv_dim = kv_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, V, T, _ = x.shape
        return x.reshape(B, V, T, self.heads, self.head_dim).permute(0, 3, 1, 2, 4)

    def logits(self, xq, psi_q, xk, psi_k) -> torch.Tensor:
        """Scaled logits, shape (B, H, Vq, Tq, Vk, Tk)."""
        q = apply_blocks(self._split(self.to_q(xq)), psi_q[:, None].to(xq.dtype))
        k = apply_blocks(self._split(self.to_k(xk)), psi_k[:, None].to(xk.dtype))
        return torch.einsum("bhvtd,bhwsd->bhvtws", q, k) / math.sqrt(self.head_dim)

    def forward(self, xq, psi_q, xk, psi_k, return_weights: bool = False):
        """xq: (B, Vq, Tq, d) with query-role blocks psi_q (B, Vq, k, k);
        xk: (B, Vk, Tk, kv_dim) with key-role blocks psi_k (B, Vk, k, k)."""
        if xk.shape[1] == 0:
            raise ValueError("attention needs at least one key view")
        B, Vq, Tq, _ = xq.shape
        logit = self.logits(xq, psi_q, xk, psi_k)
        m = logit.amax(dim=(-2, -1), keepdim=True)
        e = torch.exp(logit - m)
        total = _sorted_sum(e.sum(-1), -1)  # (B, H, Vq, Tq)
        w = e / total[..., None, None]
        v = self._split(self.to_v(xk))  # (B, H, Vk, Tk, dh)
        per_view = torch.einsum("bhvtws,bhwsd->bhvtwd", w, v)
        out = _sorted_sum(per_view, -2)  # (B, H, Vq, Tq, dh)
        out = out.permute(0, 2, 3, 1, 4).reshape(B, Vq, Tq, self.dim)
        out = self.to_out(out)
        return (out, w) if return_weights else out


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual attention among all target-view tokens."""

    def __init__(self, dim: int, heads: int, cfg: CapeConfig):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = CapeAttention(dim, heads, cfg)

    def forward(self, x, blocks: dict):
        h = self.norm(x)
        return x + self.attn(h, blocks[Role.QUERY], h, blocks[Role.KEY])


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual attention from target tokens to reference tokens."""

    def __init__(self, dim: int, heads: int, cfg: CapeConfig, ctx_dim: Optional[int] = None):
        super().__init__()
        ctx_dim = ctx_dim or dim
        self.norm = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(ctx_dim)
        self.attn = CapeAttention(dim, heads, cfg, kv_dim=ctx_dim)

    def forward(self, x, blocks: dict, ctx, ctx_blocks: dict):
        if ctx.shape[1] == 0:
            raise ValueError("cross-attention needs at least one reference view")
        return x + self.attn(self.norm(x), blocks[Role.QUERY], self.norm_ctx(ctx), ctx_blocks[Role.KEY])


# -- list-of-views API ---------------------------------------------------------


def _stack(views: list[ViewTokens], cfg: CapeConfig, dtype) -> tuple[torch.Tensor, dict]:
    if not views:
        raise ValueError("empty view list")
    x = torch.stack([v.tokens for v in views])[None]
    blocks = {r: b[None] for r, b in batch_blocks([v.pose for v in views], cfg).items()}
    return x.to(dtype), blocks


def cape_attention(
    queries: list[ViewTokens], keys_values: list[ViewTokens], attn: CapeAttention, return_weights: bool = False
) -> list[AttentionOutput]:
    """Attend from every query view to the union of all key views' tokens."""
    if not keys_values:
        raise ValueError("attention needs at least one key view")
    dtype = queries[0].tokens.dtype
    xq, bq = _stack(queries, attn.cfg, dtype)
    xk, bk = _stack(keys_values, attn.cfg, dtype)
    out = attn(xq, bq[Role.QUERY], xk, bk[Role.KEY], return_weights=return_weights)
    if not return_weights:
        return [AttentionOutput(o) for o in out[0]]
    out, w = out
    H, Vq, Tq = w.shape[1], w.shape[2], w.shape[3]
    w = w[0].reshape(H, Vq, Tq, -1)
    return [AttentionOutput(out[0, i], w[:, i]) for i in range(Vq)]


def self_attention_block(targets: list[ViewTokens], block: SelfAttentionBlock) -> list[ViewTokens]:
    if not targets:
        raise ValueError("self-attention needs at least one target view")
    x, blocks = _stack(targets, block.attn.cfg, targets[0].tokens.dtype)
    out = block(x, blocks)[0]
    return [ViewTokens(o, t.pose, t.role) for o, t in zip(out, targets)]


def cross_attention_block(
    targets: list[ViewTokens], references: list[ViewTokens], block: CrossAttentionBlock
) -> list[ViewTokens]:
    if not references:
        raise ValueError("cross-attention needs at least one reference view")
    dtype = targets[0].tokens.dtype
    x, blocks = _stack(targets, block.attn.cfg, dtype)
    ctx, ctx_blocks = _stack(references, block.attn.cfg, dtype)
    out = block(x, blocks, ctx, ctx_blocks)[0]
    return [ViewTokens(o, t.pose, t.role) for o, t in zip(out, targets)]
