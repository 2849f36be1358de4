"""Per-slice cross-attention fusion of the diffusion and susceptibility modalities.

DWI drives the queries on a coarse ``p1`` token grid; SWAN and PHASE drive keys and values on
the finer ``p2`` grid. The attended tokens are folded back into a feature map and, unless the
upsampling block is disabled, merged with full-resolution susceptibility detail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from clotseg.config.settings import FusionConfig
from clotseg.core.errors import DimensionError
from clotseg.layers.base import MLP, Conv2d, LayerNorm, Module, parameter
from clotseg.tensor import functional as F
from clotseg.tensor.tensor import DEFAULT_DTYPE, Tensor

DETAIL_CHANNELS = 12
DETAIL_KERNEL = 3
MERGE_KERNEL = 7
EMBED_STD = 0.02


@dataclass
class TokenGrid:
    tokens: Tensor
    grid_side: int
    has_class: bool = True

    def __post_init__(self) -> None:
        expected = self.grid_side**2 + (1 if self.has_class else 0)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != expected:
            raise DimensionError(
                f"Token grid of side {self.grid_side} needs {expected} tokens, got shape {self.tokens.shape}"
            )

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def body(self) -> Tensor:
        return self.tokens[1:] if self.has_class else self.tokens

    def as_map(self) -> Tensor:
        """Reshape the non-class tokens to (side, side, width)."""
        return self.body().reshape(self.grid_side, self.grid_side, self.width)


def patch_embed(img: Tensor, projection: Conv2d, class_token: Optional[Tensor], pos: Optional[Tensor]) -> TokenGrid:
    """Project non-overlapping patches to tokens; prepend the class token, then add positions."""
    patch = projection.kernel.shape[-1]
    side = img.shape[-1]
    if img.shape[-2] != side or side % patch:
        raise DimensionError(f"patch_embed: patch {patch} does not tile a {img.shape[-2]}x{side} image")
    grid = side // patch
    feat = F.conv2d(img, projection.kernel, projection.bias, padding="valid", stride=patch)
    tokens = feat.reshape(feat.shape[0], grid * grid).T
    if class_token is not None:
        tokens = F.concat([class_token, tokens], axis=0)
    if pos is not None:
        tokens = tokens + pos
    return TokenGrid(tokens, grid, has_class=class_token is not None)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, d_k: Optional[int] = None) -> Tensor:
    scale = 1.0 / math.sqrt(d_k or q.shape[-1])
    weights = F.softmax_lastdim((q @ k.T) * scale)
    return weights @ v


def upsample_tokens(grid: TokenGrid, factor: int) -> TokenGrid:
    """Nearest replication on the token grid; the class token is carried unchanged."""
    if factor == 1:
        return grid
    side = grid.grid_side
    planes = grid.as_map().transpose(2, 0, 1)
    wide = F.resize_nearest(planes, factor)
    new_side = side * factor
    body = wide.reshape(grid.width, new_side * new_side).T
    if grid.has_class:
        body = F.concat([grid.tokens[0:1], body], axis=0)
    return TokenGrid(body, new_side, has_class=grid.has_class)


class CrossAttention(Module):
    def __init__(self, d_k: int, hidden: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.d_k = d_k
        self.norm_q = LayerNorm(d_k, dtype=dtype)
        self.norm_kv = LayerNorm(d_k, dtype=dtype)
        self.mlp_q = MLP(d_k, hidden, rng, dtype=dtype)
        self.mlp_k = MLP(d_k, hidden, rng, dtype=dtype)
        self.mlp_v = MLP(d_k, hidden, rng, dtype=dtype)

    def forward(self, q_side: TokenGrid, kv_side: TokenGrid) -> TokenGrid:
        return cross_attention(q_side, kv_side, self)


def cross_attention(q_side: TokenGrid, kv_side: TokenGrid, attn: CrossAttention) -> TokenGrid:
    if q_side.width != kv_side.width:
        raise DimensionError(f"cross_attention: token widths differ ({q_side.width} vs {kv_side.width})")
    if kv_side.grid_side % q_side.grid_side:
        raise DimensionError(
            f"cross_attention: query grid side {q_side.grid_side} does not divide key/value side {kv_side.grid_side}"
        )
    if q_side.has_class != kv_side.has_class:
        raise DimensionError("cross_attention: both token grids must agree on carrying a class token")
    kv_normed = attn.norm_kv(kv_side.tokens)
    q = TokenGrid(attn.mlp_q(attn.norm_q(q_side.tokens)), q_side.grid_side, q_side.has_class)
    q = upsample_tokens(q, kv_side.grid_side // q_side.grid_side)
    k = attn.mlp_k(kv_normed)
    v = attn.mlp_v(kv_normed)
    return TokenGrid(scaled_dot_attention(q.tokens, k, v, attn.d_k), kv_side.grid_side, kv_side.has_class)


class ResidualGates(Module):
    def __init__(self, d_k: int, hidden: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.lambda1 = parameter(np.ones(()), dtype)
        self.lambda2 = parameter(np.ones(()), dtype)
        self.norm_mix = LayerNorm(d_k, dtype=dtype)
        self.norm_out = LayerNorm(d_k, dtype=dtype)
        self.mlp_out = MLP(d_k, hidden, rng, dtype=dtype)


def attention_residuals(z12: TokenGrid, z2: TokenGrid, gates: ResidualGates) -> Tensor:
    """z3 = Norm(z12 + l1*z2), z4 = z3 + l2*MLP(Norm(z3)) over non-class tokens, as (side, side, d_k)."""
    if z12.grid_side != z2.grid_side or z12.width != z2.width:
        raise DimensionError("attention_residuals: token grids are not aligned")
    z3 = gates.norm_mix(z12.body() + gates.lambda1 * z2.body())
    z4 = z3 + gates.lambda2 * gates.mlp_out(gates.norm_out(z3))
    return z4.reshape(z12.grid_side, z12.grid_side, z12.width)


class DetailMerge(Module):
    def __init__(self, in_detail: int, d_k: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.detail = Conv2d(in_detail, DETAIL_CHANNELS, DETAIL_KERNEL, rng, dtype=dtype)
        self.merge = Conv2d(DETAIL_CHANNELS + d_k, d_k, MERGE_KERNEL, rng, dtype=dtype)
        self.norm = LayerNorm(d_k, dtype=dtype)


def upsample_block(z4: Tensor, swan_phase: Tensor, block: DetailMerge, factor: int) -> Tensor:
    """Merge the upsampled attention map with susceptibility detail; returns (n1, n1, d_k)."""
    a1 = F.relu(block.detail(swan_phase))
    a2 = F.resize_nearest(z4.transpose(2, 0, 1), factor)
    if a2.shape[1:] != swan_phase.shape[1:]:
        raise DimensionError(f"upsample_block: upsampled map {a2.shape[1:]} does not match input plane {swan_phase.shape[1:]}")
    merged = block.merge(F.concat([a1, a2], axis=0)).transpose(1, 2, 0)
    return F.elu(block.norm(merged))


class PatchEmbedding(Module):
    def __init__(self, channels: int, patch: int, d_k: int, grid_side: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.projection = Conv2d(channels, d_k, patch, rng, padding="valid", stride=patch, dtype=dtype)
        self.class_token = parameter(rng.normal(0.0, EMBED_STD, size=(1, d_k)), dtype)
        self.pos = parameter(rng.normal(0.0, EMBED_STD, size=(grid_side * grid_side + 1, d_k)), dtype)

    def forward(self, img: Tensor) -> TokenGrid:
        return patch_embed(img, self.projection, self.class_token, self.pos)


class FusionBlock(Module):
    """DWI (1, n1, n1) and SWAN||PHASE (2, n1, n1) slice planes to z5 of shape (d_k, n1, n1)."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, *, upsample: bool = True, dtype: np.dtype = DEFAULT_DTYPE) -> None:
        super().__init__()
        self.cfg = cfg
        self.upsample = upsample
        self.embed_q = PatchEmbedding(1, cfg.p1, cfg.d_k, cfg.q_side, rng, dtype)
        self.embed_kv = PatchEmbedding(2, cfg.p2, cfg.d_k, cfg.kv_side, rng, dtype)
        self.attention = CrossAttention(cfg.d_k, cfg.mlp_hidden, rng, dtype)
        self.residual = ResidualGates(cfg.d_k, cfg.mlp_hidden, rng, dtype)
        if upsample:
            self.detail = DetailMerge(2, cfg.d_k, rng, dtype)

    def forward(self, dwi: Tensor, swan_phase: Tensor) -> Tensor:
        z11 = self.embed_q(dwi)
        z12 = self.embed_kv(swan_phase)
        z2 = self.attention(z11, z12)
        z4 = attention_residuals(z12, z2, self.residual)
        if self.upsample:
            return upsample_block(z4, swan_phase, self.detail, self.cfg.p2).transpose(2, 0, 1)
        return F.resize_nearest(z4.transpose(2, 0, 1), self.cfg.p2)


__all__ = [
    "CrossAttention",
    "DetailMerge",
    "FusionBlock",
    "PatchEmbedding",
    "ResidualGates",
    "TokenGrid",
    "attention_residuals",
    "cross_attention",
    "patch_embed",
    "scaled_dot_attention",
    "upsample_block",
    "upsample_tokens",
]
