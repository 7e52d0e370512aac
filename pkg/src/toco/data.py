"""Synthetic multi-label shapes dataset and a VOC-style directory loader.

Images are 8-bit-quantized RGB in [0, 1] so a PNG export/import round-trip
is exact. Ground-truth masks use the shared label encoding (0 background,
1..c classes) and are reachable only through an evaluation-only accessor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .cam import load_label_png, save_label_png

SHAPE_NAMES = ("circle", "triangle", "rectangle")

# class-correlated base colors (RGB in [0, 1]); instances jitter around these
_BASE_COLORS = np.array(
    [
        [0.85, 0.25, 0.25],  # circle
        [0.25, 0.80, 0.30],  # triangle
        [0.25, 0.35, 0.85],  # rectangle
    ]
)

# background texture: smooth low-frequency field plus per-pixel grain
BG_SMOOTH_AMP = 0.06
BG_PIXEL_NOISE = 0.015
COLOR_JITTER = 0.15


@dataclass
class Sample:
    """One image with image-level labels; the pixel mask is evaluation-only."""

    image: Tensor          # [3, H, W] float32 in [0, 1]
    image_labels: Tensor   # [c] float32 in {0, 1}
    _gt_mask: Tensor = field(repr=False)  # [H, W] int64, 0=BG, 1..c=classes

    def eval_mask(self) -> Tensor:
        """Ground-truth mask for metric computation; never a training input."""
        return self._gt_mask


def _smooth_noise(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    coarse = rng.normal(0.0, amp, size=(3, cells, cells)).astype(np.float32)
    t = torch.from_numpy(coarse).unsqueeze(0)
    fine = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return fine[0].numpy()


def _shape_mask(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    margin = 0.26 * size
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    if cls == 0:  # circle
        r = rng.uniform(0.12, 0.22) * size
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if cls == 1:  # triangle
        r = rng.uniform(0.16, 0.26) * size
        theta = rng.uniform(0.0, 2.0 * np.pi)
        angles = theta + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        vx = cx + r * np.cos(angles)
        vy = cy + r * np.sin(angles)
        inside = np.ones((size, size), dtype=bool)
        for j in range(3):
            x1, y1 = vx[j], vy[j]
            x2, y2 = vx[(j + 1) % 3], vy[(j + 1) % 3]
            cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
            inside &= cross >= 0 if _triangle_ccw(vx, vy) else cross <= 0
        return inside
    # rectangle
    hw = rng.uniform(0.10, 0.20) * size
    hh = rng.uniform(0.10, 0.20) * size
    return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)


def _triangle_ccw(vx: np.ndarray, vy: np.ndarray) -> bool:
    area2 = (vx[1] - vx[0]) * (vy[2] - vy[0]) - (vx[2] - vx[0]) * (vy[1] - vy[0])
    return area2 > 0


def _generate_one(rng: np.random.Generator, classes: int, size: int) -> Sample:
    base = rng.uniform(0.25, 0.55)
    tint = rng.uniform(-0.05, 0.05, size=3)
    image = np.full((3, size, size), base, dtype=np.float32)
    image += tint[:, None, None].astype(np.float32)
    image += _smooth_noise(rng, size, cells=8, amp=BG_SMOOTH_AMP)
    image += rng.normal(0.0, BG_PIXEL_NOISE, size=image.shape).astype(np.float32)

    mask = np.zeros((size, size), dtype=np.int64)
    k = int(rng.integers(1, min(3, classes) + 1))
    chosen = rng.choice(classes, size=k, replace=False)
    for cls in chosen:
        region = _shape_mask(rng, int(cls), size)
        color = _BASE_COLORS[int(cls)] * rng.uniform(0.7, 1.1)
        color = color + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
        color = np.clip(color, 0.05, 0.95)
        shade = rng.normal(0.0, 0.02, size=(size, size)).astype(np.float32)
        for ch in range(3):
            image[ch][region] = color[ch] + shade[region]
        mask[region] = int(cls) + 1

    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0  # 8-bit grid for exact PNG round-trips
    labels = np.zeros(classes, dtype=np.float32)
    for cls in range(classes):
        if (mask == cls + 1).any():
            labels[cls] = 1.0
    return Sample(
        image=torch.from_numpy(image.astype(np.float32)),
        image_labels=torch.from_numpy(labels),
        _gt_mask=torch.from_numpy(mask),
    )


def gen_shapes_dataset(n: int, classes: int, size: int, seed: int) -> list[Sample]:
    """Deterministic shapes dataset: 1-3 distinct-class shapes per image.

    Shapes have class-correlated colors with per-instance jitter on a
    textured noise background; image labels are recomputed from the final
    mask, so occluded shapes never leak into the labels.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if classes > len(SHAPE_NAMES):
        raise ValueError(f"at most {len(SHAPE_NAMES)} shape classes available")
    if size < 32:
        raise ValueError("image size must be >= 32")
    return [
        _generate_one(np.random.default_rng([seed, i]), classes, size)
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# directory format: images/*.png, masks/*.png, labels.txt


def export_dataset(samples: list[Sample], directory: str | Path) -> Path:
    """Write PNG images, palette masks and a labels.txt index."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    classes = samples[0].image_labels.numel() if samples else 0
    lines = []
    for i, s in enumerate(samples):
        name = f"img_{i:05d}"
        arr = (s.image.numpy() * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(directory / "images" / f"{name}.png")
        save_label_png(s.eval_mask(), directory / "masks" / f"{name}.png", classes)
        present = [str(k) for k in range(classes) if s.image_labels[k] > 0]
        lines.append(f"{name} {','.join(present)}")
    (directory / "labels.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory


def load_dir_dataset(path: str | Path, num_classes: int | None = None) -> list[Sample]:
    """Read a directory dataset back; masks stay evaluation-only.

    Image-level labels come from labels.txt when present, otherwise they
    are derived from the masks. An empty or missing images/ directory is an
    empty dataset.
    """
    path = Path(path)
    image_dir = path / "images"
    if not image_dir.is_dir():
        return []
    image_files = sorted(image_dir.glob("*.png"))
    if not image_files:
        return []

    labels_file = path / "labels.txt"
    declared: dict[str, list[int]] = {}
    if labels_file.exists():
        for line in labels_file.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            name, _, ids = line.partition(" ")
            declared[name] = [int(tok) for tok in ids.split(",") if tok != ""]

    if num_classes is None:
        if declared:
            num_classes = max((max(v) + 1 for v in declared.values() if v), default=0)
        else:
            num_classes = 0
            for f in image_files:
                mask_path = path / "masks" / f.name
                if mask_path.exists():
                    arr = np.asarray(Image.open(mask_path))
                    vals = arr[arr != 255]
                    if vals.size:
                        num_classes = max(num_classes, int(vals.max()))
        if num_classes == 0:
            raise ValueError(f"cannot infer class count from {path}")

    samples = []
    for f in image_files:
        try:
            img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise OSError(f"corrupt image file: {f}") from exc
        mask_path = path / "masks" / f.name
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for {f.name}: {mask_path}")
        mask = load_label_png(mask_path, num_classes)
        name = f.stem
        if name in declared:
            labels = np.zeros(num_classes, dtype=np.float32)
            labels[declared[name]] = 1.0
        else:
            labels = np.zeros(num_classes, dtype=np.float32)
            for k in range(num_classes):
                if (mask == k + 1).any():
                    labels[k] = 1.0
        samples.append(
            Sample(
                image=torch.from_numpy(img.transpose(2, 0, 1).copy()),
                image_labels=torch.from_numpy(labels),
                _gt_mask=torch.from_numpy(mask),
            )
        )
    return samples
