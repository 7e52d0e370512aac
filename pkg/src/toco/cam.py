"""Class activation maps, classification heads and dual-threshold pseudo labels.

Label grids use a fixed integer encoding shared with the PNG palette
exports: 0 is background, 1..c are the foreground classes (class index k
maps to k + 1), and 255 marks uncertain/ignored positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .vit import TokenGrid

BACKGROUND = 0
IGNORE = 255

_LOG_CLAMP = 1e-12


class ClassifierHead(nn.Module):
    """Bias-free linear classifier whose weight rows double as CAM weights."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc = nn.Linear(dim, num_classes, bias=False)

    @property
    def weight(self) -> Tensor:
        return self.fc.weight  # [c, d]

    def forward(self, pooled: Tensor) -> Tensor:
        return self.fc(pooled)


@dataclass
class ActivationMap:
    """Per-class activation grid in [0, 1], shape [..., c, h, w].

    ``present`` is a boolean [..., c] mask; maps of absent classes are zero
    by construction.
    """

    values: Tensor
    present: Tensor

    @property
    def batched(self) -> tuple[Tensor, Tensor]:
        if self.values.dim() == 3:
            return self.values.unsqueeze(0), self.present.reshape(1, -1)
        return self.values, self.present


def gmp_classify(tokens: TokenGrid | Tensor, head: ClassifierHead) -> Tensor:
    """Global max-pool over tokens followed by the linear head.

    At ties the subgradient flows to a single (first) maximal token.
    Accepts [n, d] or [B, n, d]; returns [c] or [B, c].
    """
    t = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    if t.shape[-2] == 0:
        raise ValueError("cannot classify an empty token grid")
    pooled = t.max(dim=-2).values
    return head(pooled)


def cls_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Multi-label soft margin loss, mean over classes (and batch)."""
    y = labels.to(logits.dtype)
    sig = torch.sigmoid(logits)
    pos = torch.log(sig.clamp_min(_LOG_CLAMP))
    neg = torch.log((1.0 - sig).clamp_min(_LOG_CLAMP))
    return -(y * pos + (1.0 - y) * neg).mean()


def compute_cam(
    tokens: TokenGrid, head: ClassifierHead, present: Tensor
) -> ActivationMap:
    """Weight patch tokens by the classifier rows, relu, max-normalize.

    A class whose rectified response is identically zero keeps an all-zero
    map (the normalization is skipped to avoid dividing by zero); classes
    absent at image level are zeroed.
    """
    h, w = tokens.grid
    feats = tokens.batched  # [B, n, d]
    present = present.to(torch.bool)
    pres = present.reshape(1, -1) if present.dim() == 1 else present
    raw = feats @ head.weight.t()  # [B, n, c]
    act = F.relu(raw)
    peak = act.amax(dim=1, keepdim=True)  # [B, 1, c]
    act = act / peak.clamp_min(torch.finfo(act.dtype).tiny)
    act = act * (peak > 0)
    act = act * pres.unsqueeze(1)
    values = act.permute(0, 2, 1).reshape(-1, head.num_classes, h, w)
    if tokens.tokens.dim() == 2:
        return ActivationMap(values[0], present.reshape(-1))
    return ActivationMap(values, pres)


def _threshold_rule(
    values: Tensor, present: Tensor, beta_low: float, beta_high: float
) -> Tensor:
    """Dual-threshold labeling shared by token- and pixel-level paths.

    ``values``: [B, c, h, w] scores in [0, 1]; ``present``: [B, c] bool.
    Scores strictly below beta_low are background, strictly above beta_high
    foreground (argmax over present classes, lowest index on ties),
    everything else uncertain.
    """
    if not 0.0 < beta_low < beta_high < 1.0:
        raise ValueError(
            f"thresholds must satisfy 0 < beta_low < beta_high < 1, "
            f"got ({beta_low}, {beta_high})"
        )
    masked = values.masked_fill(~present[:, :, None, None], -1.0)
    score, cls = masked.max(dim=1)  # [B, h, w]
    labels = torch.full_like(cls, IGNORE)
    labels[score < beta_low] = BACKGROUND
    fg = score > beta_high
    labels[fg] = cls[fg] + 1
    return labels


def token_pseudo_labels(amap: ActivationMap, beta_low: float, beta_high: float) -> Tensor:
    """Per-token labels {0=BG, 1..c=FG, 255=uncertain} from an activation map."""
    values, present = amap.batched
    labels = _threshold_rule(values, present, beta_low, beta_high)
    return labels[0] if amap.values.dim() == 3 else labels


def seg_pseudo_labels(
    amap: ActivationMap,
    beta_low: float,
    beta_high: float,
    out_size: tuple[int, int] | None = None,
) -> Tensor:
    """Pixel labels from a CAM nearest-upsampled to the output resolution.

    Uncertain positions get the IGNORE value used by the segmentation loss.
    """
    values, present = amap.batched
    if out_size is not None and tuple(values.shape[-2:]) != tuple(out_size):
        values = F.interpolate(values, size=tuple(out_size), mode="nearest")
    labels = _threshold_rule(values, present, beta_low, beta_high)
    return labels[0] if amap.values.dim() == 3 else labels


# ---------------------------------------------------------------------------
# PNG export


def label_palette(num_classes: int) -> list[int]:
    """Flat RGB palette: 0 black (BG), 1..c saturated hues, 255 white (IGNORE)."""
    palette = [0] * 768
    for k in range(1, num_classes + 1):
        hue = (k - 1) / max(num_classes, 1)
        r, g, b = _hue_rgb(hue)
        palette[3 * k : 3 * k + 3] = [r, g, b]
    palette[3 * 255 : 3 * 255 + 3] = [255, 255, 255]
    return palette


def _hue_rgb(hue: float) -> tuple[int, int, int]:
    x = hue * 6.0
    r = max(0.0, min(1.0, abs(x - 3.0) - 1.0))
    g = max(0.0, min(1.0, 2.0 - abs(x - 2.0)))
    b = max(0.0, min(1.0, 2.0 - abs(x - 4.0)))
    return int(r * 255), int(g * 255), int(b * 255)


def save_label_png(labels: Tensor | np.ndarray, path: str | Path, num_classes: int) -> None:
    arr = labels.detach().cpu().numpy() if isinstance(labels, Tensor) else labels
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    img.putpalette(label_palette(num_classes))
    img.save(Path(path))


def load_label_png(path: str | Path, num_classes: int) -> np.ndarray:
    """Read a palette label PNG, validating every index against the encoding."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label mask not found: {path}")
    arr = np.asarray(Image.open(path))
    valid = set(range(num_classes + 1)) | {IGNORE}
    bad = set(np.unique(arr).tolist()) - valid
    if bad:
        raise ValueError(
            f"unknown palette index {sorted(bad)} in {path}; "
            f"expected 0=BG, 1..{num_classes}=classes, {IGNORE}=IGNORE"
        )
    return arr.astype(np.int64)


def save_cam_png(values: Tensor | np.ndarray, path: str | Path) -> None:
    """Grayscale render of a single [h, w] activation map in [0, 1]."""
    arr = values.detach().cpu().numpy() if isinstance(values, Tensor) else values
    gray = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(Path(path))
