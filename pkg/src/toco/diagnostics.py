"""Experiment diagnostics: similarity curves, renders, evaluation, ablations.

Everything here is a pure function of (checkpoint, dataset, config, seed)
and writes plain files (PNG/CSV); the ablation CSV is grown by an atomic
write-to-temp-and-rename append so parallel grid points can share it.
"""

from __future__ import annotations

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from PIL import Image  # noqa: E402

from .cam import compute_cam, gmp_classify, seg_pseudo_labels
from .config import TrainConfig
from .data import Sample
from .metrics import IoUReport, confusion_matrix, miou_from_confusion
from .segmenter import ToCoNet, decode, upsample_logits
from .train import load_model, train
from .vit import class_attention_map

ABLATION_HEADER = [
    "# toco-ablation-v1",
    "setting,seed,pseudo_miou,aux_miou,seg_miou,final_block_sim,status",
]

COSINE_EPS = 1e-8


def mean_pairwise_cosine(tokens: Tensor) -> float:
    """Mean cosine similarity over unordered token pairs ([n, d] input)."""
    unit = tokens / tokens.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
    sim = unit @ unit.t()
    n = sim.shape[0]
    return float((sim.sum() - sim.diagonal().sum()) / (n * (n - 1)))


@torch.no_grad()
def blockwise_similarity(
    net: ToCoNet, dataset: list[Sample], sample_limit: int = 32
) -> list[float]:
    """Per-block mean pairwise cosine similarity, averaged over images."""
    if not dataset:
        raise ValueError("dataset is empty")
    subset = dataset[:sample_limit]
    images = torch.stack([s.image for s in subset])
    trace = net.encoder(images, record_attention=False)
    values = []
    for grid in trace.tokens:
        feats = grid.batched
        values.append(
            float(np.mean([mean_pairwise_cosine(feats[i]) for i in range(feats.shape[0])]))
        )
    return values


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def evaluate_model(
    net: ToCoNet, dataset: list[Sample], batch_size: int = 32
) -> dict[str, IoUReport]:
    """IoU of final-CAM pseudo labels, auxiliary-CAM pseudo labels, decoder.

    Presence at evaluation time comes from each head's own sigmoid > 0.5.
    """
    cfg = net.cfg
    classes = cfg.num_classes
    n_labels = classes + 1
    cms = {key: np.zeros((n_labels, n_labels), dtype=np.int64) for key in ("cam", "aux_cam", "seg")}
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        images = torch.stack([s.image for s in chunk])
        gts = torch.stack([s.eval_mask() for s in chunk])
        size = images.shape[-2:]
        trace = net.encoder(images, record_attention=False)
        f_aux = trace.block_tokens(cfg.vit.aux_block)
        f_fin = trace.final_tokens
        for key, tokens, head in (
            ("cam", f_fin, net.main_head),
            ("aux_cam", f_aux, net.aux_head),
        ):
            present = torch.sigmoid(gmp_classify(tokens, head)) > 0.5
            amap = compute_cam(tokens, head, present)
            preds = seg_pseudo_labels(amap, cfg.beta_low, cfg.beta_high, out_size=size)
            cms[key] += confusion_matrix(preds, gts, n_labels)
        seg_logits = upsample_logits(decode(f_fin, net.decoder), size)
        cms["seg"] += confusion_matrix(seg_logits.argmax(dim=1), gts, n_labels)
    return {key: miou_from_confusion(cm) for key, cm in cms.items()}


def evaluate_checkpoint(checkpoint_dir: str | Path, dataset: list[Sample]) -> dict[str, IoUReport]:
    net, _ = load_model(checkpoint_dir)
    net.eval()
    return evaluate_model(net, dataset)


# ---------------------------------------------------------------------------
# renders


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_rgb(img_chw: np.ndarray, path: Path) -> None:
    Image.fromarray(_to_uint8(img_chw).transpose(1, 2, 0), mode="RGB").save(path)


@torch.no_grad()
def render_cam(sample: Sample, net: ToCoNet, out_dir: str | Path) -> list[Path]:
    """Write per-class CAM overlays and the final-token |cosine| map.

    Overlay opacity follows the activation, so a zero map reproduces the
    input image exactly. The similarity map is an n x n grayscale PNG with
    value round(|cos| * 255) (round-half-even).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = net.cfg
    image = sample.image
    size = image.shape[-2:]
    trace = net.encoder(image.unsqueeze(0), record_attention=False)
    f_fin = trace.final_tokens
    present = torch.sigmoid(gmp_classify(f_fin, net.main_head))[0] > 0.5
    amap = compute_cam(f_fin, net.main_head, present)
    values = torch.nn.functional.interpolate(amap.values, size=size, mode="bilinear", align_corners=False)[0]

    written = []
    img_np = image.numpy()
    colormap = plt.get_cmap("jet")
    for k in range(cfg.num_classes):
        cam_np = values[k].numpy()
        heat = colormap(cam_np)[..., :3].transpose(2, 0, 1)
        overlay = img_np * (1.0 - cam_np) + heat * cam_np
        path = out_dir / f"cam_class{k}.png"
        _save_rgb(overlay, path)
        written.append(path)

    feats = f_fin.batched[0]
    unit = feats / feats.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
    sim = (unit @ unit.t()).abs().clamp(0.0, 1.0).numpy()
    sim_path = out_dir / "sim_map.png"
    Image.fromarray(np.round(sim * 255.0).astype(np.uint8), mode="L").save(sim_path)
    written.append(sim_path)
    return written


@torch.no_grad()
def render_class_attention(
    sample: Sample, net: ToCoNet, out_dir: str | Path, block: int | None = None
) -> Path:
    """Grayscale render of the class token's attention over patch tokens."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    block = block or net.cfg.vit.depth
    trace = net.encoder(sample.image.unsqueeze(0), record_attention=True)
    attn = class_attention_map(trace, block)[0]
    attn = attn / attn.max().clamp_min(COSINE_EPS)
    size = sample.image.shape[-2:]
    up = torch.nn.functional.interpolate(
        attn[None, None], size=size, mode="bilinear", align_corners=False
    )[0, 0]
    path = out_dir / f"class_attention_block{block}.png"
    Image.fromarray(_to_uint8(up.numpy()), mode="L").save(path)
    return path


def render_similarity_curve(
    curves: dict[str, list[float]], path: str | Path
) -> Path:
    """Line plot of per-block mean pairwise cosine similarity."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in curves.items():
        ax.plot(range(1, len(values) + 1), values, marker="o", label=label)
    ax.set_xlabel("block")
    ax.set_ylabel("mean pairwise cosine similarity")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# ablation harness


def append_rows_atomic(path: str | Path, rows: list[str], header: list[str] = ABLATION_HEADER) -> None:
    """Append rows via write-to-temp-and-rename; creates the file with header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    existing = path.read_text() if path.exists() else "\n".join(header) + "\n"
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{time.time_ns()}.tmp")
    tmp.write_text(existing + "".join(row + "\n" for row in rows))
    os.replace(tmp, path)


def _run_grid_point(
    base_cfg: TrainConfig,
    overrides: dict,
    seed: int,
    setting: str,
    run_dir: Path,
    csv_path: Path,
    eval_dataset: list[Sample],
) -> str:
    try:
        cfg = base_cfg.replace(**overrides).replace(seed=seed)
        result = train(cfg, run_dir)
        reports = evaluate_model(result.net, eval_dataset)
        sims = blockwise_similarity(result.net, eval_dataset)
        row = (
            f'"{setting}",{seed},{reports["cam"].miou:.6f},'
            f'{reports["aux_cam"].miou:.6f},{reports["seg"].miou:.6f},'
            f"{sims[-1]:.6f},ok"
        )
    except Exception as exc:  # record and continue with the rest of the grid
        row = f'"{setting}",{seed},nan,nan,nan,nan,error: {exc}'
    append_rows_atomic(csv_path, [row])
    return row


def run_ablation(
    base_cfg: TrainConfig,
    axes: dict[str, list],
    seeds: list[int],
    out_dir: str | Path,
    eval_dataset: list[Sample],
    csv_name: str = "ablation.csv",
) -> Path:
    """Run one training per grid point x seed, appending results atomically.

    ``axes`` maps config field names (dotted keys reach into the backbone
    config) to value lists; the grid is their cartesian product.
    """
    out_dir = Path(out_dir)
    csv_path = out_dir / csv_name
    keys = sorted(axes)
    for idx, combo in enumerate(itertools.product(*(axes[k] for k in keys))):
        overrides = dict(zip(keys, combo))
        setting = json.dumps(overrides, sort_keys=True).replace('"', "'")
        for seed in seeds:
            run_dir = out_dir / "runs" / f"point{idx:03d}_s{seed}"
            _run_grid_point(base_cfg, overrides, seed, setting, run_dir, csv_path, eval_dataset)
    return csv_path
