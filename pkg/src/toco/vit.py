"""Small Vision Transformer encoder with per-block introspection.

The encoder keeps the whole forward pass inspectable: every block's patch
tokens, class token and attention maps are recorded in a ForwardTrace so
downstream losses and diagnostics can tap any depth. Block indices are
1-based throughout the public API (block 1 is the first transformer block).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


class NonFiniteActivationError(RuntimeError):
    """Raised when a forward pass produces NaN or Inf activations."""


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 6
    dim: int = 96
    heads: int = 4
    mlp_ratio: float = 4.0
    aux_block: int = 5  # 1-based index of the intermediate feature tap

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if not 1 <= self.aux_block <= self.depth:
            raise ValueError(f"aux_block {self.aux_block} outside 1..{self.depth}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        h, w = self.grid
        return h * w


@dataclass
class TokenGrid:
    """Patch-token matrix together with its 2-D spatial layout.

    ``tokens`` has shape [..., n, d] (an optional leading batch dimension);
    ``grid`` is (h, w) with n = h * w.
    """

    tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[-2] != h * w:
            raise ValueError(
                f"token count {self.tokens.shape[-2]} != grid {h}x{w}"
            )

    @property
    def batched(self) -> Tensor:
        """Tokens with an explicit batch dimension, shape [B, n, d]."""
        return self.tokens if self.tokens.dim() == 3 else self.tokens.unsqueeze(0)


@dataclass
class ForwardTrace:
    """Per-block record of one encoder forward pass.

    All lists have length ``depth``; entry i holds the output of block i+1.
    Attention tensors have shape [B, heads, n+1, n+1] with the class token
    at position 0.
    """

    tokens: list[TokenGrid] = field(default_factory=list)
    cls_tokens: list[Tensor] = field(default_factory=list)
    attentions: list[Tensor] = field(default_factory=list)
    grid: tuple[int, int] = (0, 0)

    @property
    def depth(self) -> int:
        return len(self.tokens)

    def block_tokens(self, block: int) -> TokenGrid:
        """Patch tokens after the given 1-based block."""
        if not 1 <= block <= self.depth:
            raise IndexError(f"block {block} outside 1..{self.depth}")
        return self.tokens[block - 1]

    @property
    def final_tokens(self) -> TokenGrid:
        return self.tokens[-1]

    @property
    def final_cls(self) -> Tensor:
        return self.cls_tokens[-1]


def interpolate_pos_embed(
    pos: Tensor,
    source_grid: tuple[int, int],
    target_grid: tuple[int, int],
    num_prefix: int = 0,
) -> Tensor:
    """Bilinearly resample a 2-D position embedding table per channel.

    ``pos`` is [n0 (+ num_prefix), d]; the first ``num_prefix`` rows (class
    token slots) are passed through unchanged. Exact identity when source
    and target grids match.
    """
    sh, sw = source_grid
    th, tw = target_grid
    prefix = pos[:num_prefix]
    body = pos[num_prefix:]
    if body.shape[0] != sh * sw:
        raise ValueError(f"pos rows {body.shape[0]} != source grid {sh}x{sw}")
    if (sh, sw) == (th, tw):
        return pos
    d = body.shape[1]
    grid = body.reshape(1, sh, sw, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(th, tw), mode="bilinear", align_corners=True)
    body = grid.permute(0, 2, 3, 1).reshape(th * tw, d)
    return torch.cat([prefix, body], dim=0)


class PatchEmbed(nn.Module):
    """Flatten non-overlapping patches and project them linearly.

    Each patch is flattened in (channel, row, col) order before projection,
    so the embedding of one patch is exactly ``W @ flat_patch + b``.
    """

    def __init__(self, patch_size: int, dim: int, in_channels: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.proj = nn.Linear(in_channels * patch_size * patch_size, dim)

    def forward(self, images: Tensor) -> TokenGrid:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        b, c, h, w = images.shape
        p = self.patch_size
        if h % p != 0 or w % p != 0:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = images.unfold(2, p, p).unfold(3, p, p)  # [b, c, gh, gw, p, p]
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, gh * gw, c * p * p)
        return TokenGrid(self.proj(patches), (gh, gw))


class Attention(nn.Module):
    """Multi-head self-attention that also returns the attention weights."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block, no dropout."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        out, attn = self.attn(self.norm1(x))
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ViTEncoder(nn.Module):
    """Class-token ViT whose forward returns a full ForwardTrace.

    Accepts any input size divisible by the patch size; the position
    embedding is bilinearly resampled when the token grid differs from the
    configured one.
    """

    def __init__(self, cfg: VitConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches + 1, cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def patchify(self, images: Tensor) -> TokenGrid:
        return self.patch_embed(images)

    def forward(self, images: Tensor, record_attention: bool = True) -> ForwardTrace:
        """Run the encoder, recording every block's tokens and attention.

        ``record_attention=False`` skips storing attention tensors (the
        trace's attention list is then empty); the numerical path is
        identical.
        """
        if not torch.isfinite(images).all():
            raise NonFiniteActivationError("non-finite values in input image")
        grid_tokens = self.patch_embed(images)
        gh, gw = grid_tokens.grid
        x = grid_tokens.batched
        b = x.shape[0]
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        pos = interpolate_pos_embed(self.pos_embed, self.cfg.grid, (gh, gw), num_prefix=1)
        x = x + pos.unsqueeze(0)

        trace = ForwardTrace(grid=(gh, gw))
        for i, block in enumerate(self.blocks):
            x, attn = block(x)
            if not torch.isfinite(x).all():
                raise NonFiniteActivationError(
                    f"non-finite activations after block {i + 1} "
                    f"(min={x.nan_to_num().min():.3e}, max={x.nan_to_num().max():.3e})"
                )
            trace.tokens.append(TokenGrid(x[:, 1:, :], (gh, gw)))
            trace.cls_tokens.append(x[:, 0, :])
            if record_attention:
                trace.attentions.append(attn)
        return trace


def class_attention_map(trace: ForwardTrace, block: int) -> Tensor:
    """Attention of the class-token query over patch-token keys.

    Averaged over heads and reshaped to the token grid; entries lie in
    [0, 1]. ``block`` is 1-based. Returns [B, h, w].
    """
    if not 1 <= block <= len(trace.attentions):
        raise IndexError(f"block {block} outside 1..{len(trace.attentions)}")
    attn = trace.attentions[block - 1]  # [B, heads, n+1, n+1]
    h, w = trace.grid
    return attn[:, :, 0, 1:].mean(dim=1).reshape(-1, h, w)
