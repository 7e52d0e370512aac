"""Class token contrast: crop sampling, twin projection heads, InfoNCE, EMA.

Local crops are sampled from uncertain (positive) and background (negative)
regions of the token label grid. Class tokens of local crops are projected
by the trainable local head and contrasted against the global image's class
token projected by the EMA-updated, gradient-free global head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .cam import BACKGROUND, IGNORE

POSITIVE = "positive"
NEGATIVE = "negative"

GLOBAL = "global"
LOCAL = "local"


@dataclass(frozen=True)
class CropProposal:
    """Axis-aligned square box (x, y, side) in global-image pixels."""

    x: int
    y: int
    side: int
    polarity: str


@dataclass
class ContrastBatch:
    """Projected global class token and the local positive/negative sets."""

    p: Tensor        # [d_proj], unit norm
    q_pos: Tensor    # [n_pos, d_proj]
    q_neg: Tensor    # [n_neg, d_proj]


class ProjectionHead(nn.Module):
    """Three linear layers with GELU in between, L2-normalized output."""

    def __init__(self, dim: int, proj_dim: int, role: str):
        super().__init__()
        if role not in (GLOBAL, LOCAL):
            raise ValueError(f"role must be {GLOBAL!r} or {LOCAL!r}, got {role!r}")
        self.role = role
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, proj_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        return F.normalize(self.fc3(x), dim=-1, eps=1e-8)


def project(class_token: Tensor, head: ProjectionHead) -> Tensor:
    """Project to the unit sphere; the global head is a stop-gradient path."""
    if head.role == GLOBAL:
        with torch.no_grad():
            return head(class_token.detach())
    return head(class_token)


def _region_counts(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inclusive 2-D prefix sums of BG / uncertain / FG token indicators."""

    def prefix(mask):
        return mask.astype(np.int64).cumsum(0).cumsum(1)

    bg = prefix(labels == BACKGROUND)
    unc = prefix(labels == IGNORE)
    fg = prefix((labels != BACKGROUND) & (labels != IGNORE))
    return bg, unc, fg


def _window_sum(prefix: np.ndarray, i0: int, i1: int, j0: int, j1: int) -> int:
    """Sum over rows i0..i1 and cols j0..j1, inclusive."""
    total = prefix[i1, j1]
    if i0 > 0:
        total -= prefix[i0 - 1, j1]
    if j0 > 0:
        total -= prefix[i1, j0 - 1]
    if i0 > 0 and j0 > 0:
        total += prefix[i0 - 1, j0 - 1]
    return int(total)


def sample_crops(
    labels: Tensor,
    image_size: int,
    n_crops: int,
    crop_size: int,
    generator: torch.Generator,
    bg_fraction: float = 0.9,
    unc_fraction: float = 0.3,
    max_retries: int = 50,
) -> list[CropProposal]:
    """Sample exactly ``n_crops`` polarity-tagged boxes from a label grid.

    A candidate box is negative when at least ``bg_fraction`` of the tokens
    it touches are reliable background and none is foreground; positive when
    at least ``unc_fraction`` are uncertain. Candidates matching neither are
    redrawn; after ``max_retries`` the box is placed at the location
    covering the most uncertain tokens and tagged positive.
    """
    if n_crops < 1:
        raise ValueError("n_crops must be >= 1")
    if crop_size > image_size:
        raise ValueError(f"crop size {crop_size} exceeds image size {image_size}")
    grid = labels.detach().cpu().numpy()
    gh, gw = grid.shape
    cell = image_size // gh
    bg_sum, unc_sum, fg_sum = _region_counts(grid)
    max_xy = image_size - crop_size

    def covered(x: int, y: int) -> tuple[int, int, int, int]:
        i0, i1 = y // cell, min((y + crop_size - 1) // cell, gh - 1)
        j0, j1 = x // cell, min((x + crop_size - 1) // cell, gw - 1)
        count = (i1 - i0 + 1) * (j1 - j0 + 1)
        return (
            _window_sum(bg_sum, i0, i1, j0, j1),
            _window_sum(unc_sum, i0, i1, j0, j1),
            _window_sum(fg_sum, i0, i1, j0, j1),
            count,
        )

    def fallback() -> CropProposal:
        best, best_xy = -1, (0, 0)
        for ti in range(gh):
            for tj in range(gw):
                x = min(tj * cell, max_xy)
                y = min(ti * cell, max_xy)
                _, unc, _, _ = covered(x, y)
                if unc > best:
                    best, best_xy = unc, (x, y)
        return CropProposal(best_xy[0], best_xy[1], crop_size, POSITIVE)

    proposals = []
    for _ in range(n_crops):
        chosen = None
        for _ in range(max_retries):
            x = int(torch.randint(0, max_xy + 1, (1,), generator=generator))
            y = int(torch.randint(0, max_xy + 1, (1,), generator=generator))
            bg, unc, fg, count = covered(x, y)
            if fg == 0 and bg >= bg_fraction * count:
                chosen = CropProposal(x, y, crop_size, NEGATIVE)
                break
            if unc >= unc_fraction * count:
                chosen = CropProposal(x, y, crop_size, POSITIVE)
                break
        proposals.append(chosen if chosen is not None else fallback())
    return proposals


def crop_and_augment(
    image: Tensor,
    proposal: CropProposal,
    generator: torch.Generator,
    augment: bool = True,
    flip_prob: float = 0.5,
    brightness: float = 0.1,
) -> Tensor:
    """Extract the proposal's box and apply flip + brightness jitter."""
    _, h, w = image.shape
    x, y, s = proposal.x, proposal.y, proposal.side
    if x < 0 or y < 0 or x + s > w or y + s > h:
        raise ValueError(f"crop box ({x},{y},{s}) out of bounds for {w}x{h} image")
    crop = image[:, y : y + s, x : x + s]
    if not augment:
        return crop
    if float(torch.rand((), generator=generator)) < flip_prob:
        crop = crop.flip(-1)
    factor = 1.0 + brightness * (2.0 * float(torch.rand((), generator=generator)) - 1.0)
    return (crop * factor).clamp(0.0, 1.0)


def ctc_loss(batch: ContrastBatch, tau: float, eps: float = 1e-8) -> Tensor:
    """InfoNCE over the projected class tokens, averaged over positives.

    Negative-free batches are legal (the denominator is numerator + eps);
    an empty positive set is an error.
    """
    if batch.q_pos.shape[0] == 0:
        raise ValueError("ctc_loss requires at least one positive local view")
    pos_logits = batch.q_pos @ batch.p / tau  # [n_pos]
    neg_sum = torch.exp(batch.q_neg @ batch.p / tau).sum() if batch.q_neg.shape[0] else 0.0
    denom = torch.exp(pos_logits) + neg_sum + eps
    return -(pos_logits - torch.log(denom)).mean()


def ema_update(global_head: nn.Module, local_head: nn.Module, momentum: float) -> None:
    """In-place convex update of the global head toward the local head."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    g_params = dict(global_head.named_parameters())
    l_params = dict(local_head.named_parameters())
    if g_params.keys() != l_params.keys():
        raise ValueError("projection heads have mismatched parameter sets")
    with torch.no_grad():
        for name, g in g_params.items():
            l = l_params[name]
            if g.shape != l.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {tuple(g.shape)} vs {tuple(l.shape)}"
                )
            g.mul_(momentum).add_(l, alpha=1.0 - momentum)
