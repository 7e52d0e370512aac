"""Segmentation decoder, pixel-adaptive refinement, loss assembly, schedule.

Also defines ToCoNet, the single-stage network bundling the encoder, both
classification heads, the twin projection heads and the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .cam import IGNORE, ClassifierHead
from .config import TrainConfig
from .ctc import GLOBAL, LOCAL, ProjectionHead
from .vit import TokenGrid, ViTEncoder


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term turns NaN or Inf."""


class SegDecoder(nn.Module):
    """Two dilated 3x3 conv layers plus a 1x1 prediction layer.

    Predicts ``num_classes + 1`` channels; channel 0 is background, channel
    k is the foreground class with label value k.
    """

    def __init__(self, dim: int, num_classes: int, dilation: int = 5):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=dilation, dilation=dilation)
        self.pred = nn.Conv2d(dim, num_classes + 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.pred(x)


def decode(tokens: TokenGrid, decoder: SegDecoder) -> Tensor:
    """Per-pixel class logits at token resolution, [B, c+1, h, w]."""
    h, w = tokens.grid
    feats = tokens.batched
    b, n, d = feats.shape
    grid = feats.transpose(1, 2).reshape(b, d, h, w)
    return decoder(grid)


def upsample_logits(logits: Tensor, size: tuple[int, int]) -> Tensor:
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


def _neighbor_stack(x: Tensor, dilations: tuple[int, ...]) -> Tensor:
    """Stack of the center tap and 8 neighbors per dilation, [B, C, T, H, W].

    Borders use replicate padding, so edge kernels average within the image.
    """
    b, c, h, w = x.shape
    views = [x]
    for d in dilations:
        xp = F.pad(x, (d, d, d, d), mode="replicate")
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                oy, ox = d + dy * d, d + dx * d
                views.append(xp[:, :, oy : oy + h, ox : ox + w])
    return torch.stack(views, dim=2)


def par_refine(
    image: Tensor,
    scores: Tensor,
    iters: int,
    dilations: tuple[int, ...] = (1, 2, 4),
    sigma: float = 0.15,
) -> Tensor:
    """Image-conditioned local averaging of per-position score maps.

    Each round replaces every position's scores by a convex combination of
    its dilated 3x3 neighborhood, weighted by exp(-|color difference|^2 /
    sigma^2). Per-position score totals are conserved, so input maps that
    are normalized per position stay normalized.
    """
    if iters <= 0:
        return scores.clone()
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
    img_nbrs = _neighbor_stack(image, dilations)  # [B, 3, T, H, W]
    diff2 = (img_nbrs - image.unsqueeze(2)).pow(2).sum(dim=1, keepdim=True)
    weights = torch.exp(-diff2 / (sigma * sigma))  # [B, 1, T, H, W]
    weights = weights / weights.sum(dim=2, keepdim=True)
    out = scores
    for _ in range(iters):
        nbrs = _neighbor_stack(out, dilations)  # [B, K, T, H, W]
        out = (nbrs * weights).sum(dim=2)
    return out


def seg_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Cross-entropy over non-ignored pixels; zero when everything is ignored."""
    if (labels != IGNORE).sum() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=IGNORE)


@dataclass
class LossBreakdown:
    """All loss terms of one step plus their weighted total."""

    l_cls: Tensor
    l_cls_aux: Tensor
    l_ptc: Tensor
    l_ctc: Tensor
    l_seg: Tensor
    total: Tensor

    def detached(self) -> dict[str, float]:
        return {
            "l_cls": float(self.l_cls.detach()),
            "l_cls_aux": float(self.l_cls_aux.detach()),
            "l_ptc": float(self.l_ptc.detach()),
            "l_ctc": float(self.l_ctc.detach()),
            "l_seg": float(self.l_seg.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    l_cls: Tensor,
    l_cls_aux: Tensor,
    l_ptc: Tensor,
    l_ctc: Tensor,
    l_seg: Tensor,
    cfg: TrainConfig,
) -> LossBreakdown:
    """Weighted sum of all loss terms; aborts on non-finite parts."""
    parts = {
        "l_cls": l_cls, "l_cls_aux": l_cls_aux,
        "l_ptc": l_ptc, "l_ctc": l_ctc, "l_seg": l_seg,
    }
    bad = [name for name, value in parts.items() if not torch.isfinite(value).all()]
    if bad:
        detail = ", ".join(f"{name}={float(parts[name]):g}" for name in bad)
        raise NonFiniteLossError(f"non-finite loss terms: {detail}")
    total = (
        l_cls
        + l_cls_aux
        + cfg.lambda_ptc * l_ptc
        + cfg.lambda_ctc * l_ctc
        + cfg.lambda_seg * l_seg
    )
    return LossBreakdown(l_cls, l_cls_aux, l_ptc, l_ctc, l_seg, total)


def lr_schedule(t: float, cfg: TrainConfig) -> float:
    """Linear warmup from lr_floor to lr_max, then polynomial decay to zero."""
    if t < 0 or t > cfg.total_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.total_iters}]")
    if t < cfg.warmup_iters:
        frac = t / cfg.warmup_iters
        return cfg.lr_floor + (cfg.lr_max - cfg.lr_floor) * frac
    span = cfg.total_iters - cfg.warmup_iters
    frac = (t - cfg.warmup_iters) / span
    return cfg.lr_max * (1.0 - frac) ** cfg.poly_power


class ToCoNet(nn.Module):
    """Encoder plus classification heads, projection heads and decoder.

    The global projection head starts as a copy of the local one and is
    excluded from gradient-based training; it only moves by EMA.
    """

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        c, d = cfg.num_classes, cfg.vit.dim
        self.encoder = ViTEncoder(cfg.vit)
        self.aux_head = ClassifierHead(d, c)
        self.main_head = ClassifierHead(d, c)
        self.proj_local = ProjectionHead(d, cfg.proj_dim, role=LOCAL)
        self.proj_global = ProjectionHead(d, cfg.proj_dim, role=GLOBAL)
        self.decoder = SegDecoder(d, c)
        self.proj_global.load_state_dict(self.proj_local.state_dict())
        for p in self.proj_global.parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
