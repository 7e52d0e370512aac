"""Training configuration and the desk/paper presets.

The ``paper`` preset carries the full-scale hyperparameters; ``desk`` is a
small configuration sized for CPU experiments on the synthetic shapes
dataset, keeping the same loss weights and thresholds.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .vit import VitConfig

PTC_MODES = ("raw", "relu", "abs")


@dataclass(frozen=True)
class TrainConfig:
    vit: VitConfig = field(default_factory=VitConfig)

    # pseudo-label thresholds
    beta_low: float = 0.25
    beta_high: float = 0.7

    # contrast losses
    tau: float = 0.5
    ema_momentum: float = 0.9
    stability_eps: float = 1e-8
    ptc_mode: str = "abs"
    proj_dim: int = 96

    # loss weights (patch contrast, class contrast, segmentation)
    lambda_ptc: float = 0.2
    lambda_ctc: float = 0.5
    lambda_seg: float = 0.1

    # local crops
    local_crop_size: int = 16
    n_crops: int = 4
    bg_fraction: float = 0.9
    unc_fraction: float = 0.3

    # refinement of segmentation pseudo labels
    par_iters: int = 2
    par_sigma: float = 0.15
    par_dilations: tuple[int, ...] = (1, 2, 4)

    # optimizer schedule
    lr_max: float = 6e-5
    lr_floor: float = 1e-6
    warmup_iters: int = 100
    total_iters: int = 3000
    poly_power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)

    batch_size: int = 8
    seed: int = 0

    # synthetic dataset
    num_classes: int = 3
    train_samples: int = 256

    # bookkeeping
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not 0.0 < self.beta_low < self.beta_high < 1.0:
            raise ValueError(
                f"thresholds must satisfy 0 < beta_low < beta_high < 1, "
                f"got ({self.beta_low}, {self.beta_high})"
            )
        if min(self.lambda_ptc, self.lambda_ctc, self.lambda_seg) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError(
                f"warmup_iters {self.warmup_iters} must be < total_iters {self.total_iters}"
            )
        if self.ptc_mode not in PTC_MODES:
            raise ValueError(f"ptc_mode must be one of {PTC_MODES}, got {self.ptc_mode!r}")
        if self.local_crop_size > self.vit.image_size:
            raise ValueError("local crop cannot exceed the global image size")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vit"] = dataclasses.asdict(self.vit)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "vit" in d:
            d["vit"] = VitConfig(**d["vit"])
        for key in ("betas", "par_dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def replace(self, **updates) -> "TrainConfig":
        """Return a copy with updates applied; dotted keys reach into vit."""
        vit_updates = {}
        flat = {}
        for key, value in updates.items():
            if key.startswith("vit."):
                vit_updates[key[4:]] = value
            else:
                flat[key] = value
        if vit_updates:
            flat["vit"] = dataclasses.replace(flat.get("vit", self.vit), **vit_updates)
        return dataclasses.replace(self, **flat)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_preset(**overrides) -> TrainConfig:
    """CPU-sized configuration for the synthetic shapes experiments."""
    cfg = TrainConfig(
        vit=VitConfig(
            image_size=64, patch_size=8, depth=6, dim=96, heads=4,
            mlp_ratio=4.0, aux_block=5,
        ),
        proj_dim=96,
        local_crop_size=16,
        lr_max=2.5e-4,
        warmup_iters=100,
        total_iters=3000,
        batch_size=8,
    )
    return cfg.replace(**overrides) if overrides else cfg


def paper_preset(**overrides) -> TrainConfig:
    """Full-scale hyperparameters (not runnable on a desk, kept for record)."""
    cfg = TrainConfig(
        vit=VitConfig(
            image_size=448, patch_size=16, depth=12, dim=768, heads=12,
            mlp_ratio=4.0, aux_block=10,
        ),
        proj_dim=256,
        local_crop_size=96,
        lr_max=6e-5,
        warmup_iters=1500,
        total_iters=20000,
        batch_size=4,
        num_classes=20,
        train_samples=10582,
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def get_preset(name: str, **overrides) -> TrainConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**overrides)
