"""Single-stage training loop joining all loss branches.

One step runs the global forward, derives pseudo token labels from the
auxiliary activation map, assembles the classification, patch-contrast,
class-contrast and segmentation losses, applies one AdamW update with the
warmup/poly schedule, then EMA-updates the global projection head.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from . import checkpoint as ckpt
from .cam import _threshold_rule, cls_loss, compute_cam, gmp_classify, token_pseudo_labels
from .config import TrainConfig
from .ctc import ContrastBatch, POSITIVE, crop_and_augment, ctc_loss, ema_update, project, sample_crops
from .data import Sample, gen_shapes_dataset
from .ptc import pairwise_relations, ptc_loss
from .segmenter import (
    LossBreakdown,
    ToCoNet,
    decode,
    lr_schedule,
    par_refine,
    seg_loss,
    total_loss,
    upsample_logits,
)
from .vit import TokenGrid

METRICS_HEADER = "iteration,l_cls,l_cls_aux,l_ptc,l_ctc,l_seg,total,lr"


@dataclass
class TrainResult:
    net: ToCoNet
    metrics_path: Path
    checkpoint_dir: Path
    config: TrainConfig


def save_model(directory: str | Path, net: ToCoNet, cfg: TrainConfig) -> Path:
    return ckpt.save_archive(directory, dict(net.state_dict()), cfg.to_dict())


def load_model(directory: str | Path) -> tuple[ToCoNet, TrainConfig]:
    tensors, config = ckpt.load_archive(directory)
    cfg = TrainConfig.from_dict(config)
    net = ToCoNet(cfg)
    net.load_state_dict(tensors, strict=True)
    return net, cfg


def _pseudo_token_labels(tokens: TokenGrid, head, labels: Tensor, cfg: TrainConfig) -> Tensor:
    with torch.no_grad():
        detached = TokenGrid(tokens.batched.detach(), tokens.grid)
        amap = compute_cam(detached, head, labels)
        return token_pseudo_labels(amap, cfg.beta_low, cfg.beta_high)


def _ptc_branch(final: TokenGrid, token_labels: Tensor, cfg: TrainConfig) -> Tensor:
    terms = []
    feats = final.batched
    for i in range(feats.shape[0]):
        rel = pairwise_relations(token_labels[i])
        if rel.n_pos or rel.n_neg:
            terms.append(ptc_loss(feats[i], rel, mode=cfg.ptc_mode, eps=cfg.stability_eps))
    if not terms:
        return torch.zeros((), dtype=feats.dtype)
    return torch.stack(terms).mean()


def _ctc_branch(
    net: ToCoNet,
    images: Tensor,
    global_cls: Tensor,
    token_labels: Tensor,
    cfg: TrainConfig,
    crop_rng: torch.Generator,
) -> Tensor:
    b = images.shape[0]
    proposals = [
        sample_crops(
            token_labels[i],
            image_size=cfg.vit.image_size,
            n_crops=cfg.n_crops,
            crop_size=cfg.local_crop_size,
            generator=crop_rng,
            bg_fraction=cfg.bg_fraction,
            unc_fraction=cfg.unc_fraction,
        )
        for i in range(b)
    ]
    locals_flat = torch.stack(
        [
            crop_and_augment(images[i], prop, crop_rng)
            for i in range(b)
            for prop in proposals[i]
        ]
    )
    local_trace = net.encoder(locals_flat, record_attention=False)
    q_all = project(local_trace.final_cls, net.proj_local)  # [b*n_crops, dp]
    p_all = project(global_cls, net.proj_global)            # [b, dp], no grad
    terms = []
    for i in range(b):
        qs = q_all[i * cfg.n_crops : (i + 1) * cfg.n_crops]
        is_pos = torch.tensor([prop.polarity == POSITIVE for prop in proposals[i]])
        if not bool(is_pos.any()):
            continue  # no positive views for this image; nothing to contrast
        batch = ContrastBatch(p=p_all[i], q_pos=qs[is_pos], q_neg=qs[~is_pos])
        terms.append(ctc_loss(batch, tau=cfg.tau, eps=cfg.stability_eps))
    if not terms:
        return torch.zeros((), dtype=images.dtype)
    return torch.stack(terms).mean()


def _seg_branch(
    net: ToCoNet, images: Tensor, final: TokenGrid, labels: Tensor, cfg: TrainConfig
) -> Tensor:
    size = images.shape[-2:]
    with torch.no_grad():
        detached = TokenGrid(final.batched.detach(), final.grid)
        amap = compute_cam(detached, net.main_head, labels)
        values, present = amap.batched
        values = torch.nn.functional.interpolate(values, size=size, mode="nearest")
        fg_max = values.masked_fill(~present[:, :, None, None], 0.0).amax(dim=1, keepdim=True)
        stack = torch.cat([1.0 - fg_max, values], dim=1)
        stack = stack / stack.sum(dim=1, keepdim=True).clamp_min(cfg.stability_eps)
        refined = par_refine(
            images, stack, cfg.par_iters, dilations=cfg.par_dilations, sigma=cfg.par_sigma
        )
        seg_labels = _threshold_rule(refined[:, 1:], present, cfg.beta_low, cfg.beta_high)
    logits = upsample_logits(decode(final, net.decoder), size)
    return seg_loss(logits, seg_labels)


def train_step(
    net: ToCoNet,
    optimizer: torch.optim.Optimizer,
    images: Tensor,
    labels: Tensor,
    cfg: TrainConfig,
    crop_rng: torch.Generator,
    iteration: int,
) -> LossBreakdown:
    lr = lr_schedule(iteration, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr

    trace = net.encoder(images, record_attention=False)
    f_aux = trace.block_tokens(cfg.vit.aux_block)
    f_fin = trace.final_tokens

    l_cls_aux = cls_loss(gmp_classify(f_aux, net.aux_head), labels)
    l_cls = cls_loss(gmp_classify(f_fin, net.main_head), labels)

    zero = torch.zeros((), dtype=images.dtype)
    l_ptc = l_ctc = l_seg = zero
    if cfg.lambda_ptc > 0 or cfg.lambda_ctc > 0:
        token_labels = _pseudo_token_labels(f_aux, net.aux_head, labels, cfg)
    if cfg.lambda_ptc > 0:
        l_ptc = _ptc_branch(f_fin, token_labels, cfg)
    if cfg.lambda_ctc > 0:
        l_ctc = _ctc_branch(net, images, trace.final_cls, token_labels, cfg, crop_rng)
    if cfg.lambda_seg > 0:
        l_seg = _seg_branch(net, images, f_fin, labels, cfg)

    breakdown = total_loss(l_cls, l_cls_aux, l_ptc, l_ctc, l_seg, cfg)
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    ema_update(net.proj_global, net.proj_local, cfg.ema_momentum)
    return breakdown


def _stack_dataset(dataset: list[Sample]) -> tuple[Tensor, Tensor]:
    images = torch.stack([s.image for s in dataset])
    labels = torch.stack([s.image_labels for s in dataset])
    return images, labels


def train(
    cfg: TrainConfig,
    out_dir: str | Path,
    dataset: list[Sample] | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Run the configured number of iterations; returns the trained network.

    Writes config.json, metrics.csv (one row per iteration) and periodic +
    final checkpoints under ``out_dir``. Fully deterministic for a fixed
    config and seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")

    torch.manual_seed(cfg.seed)
    if dataset is None:
        dataset = gen_shapes_dataset(
            cfg.train_samples, cfg.num_classes, cfg.vit.image_size, seed=cfg.seed
        )
    images_all, labels_all = _stack_dataset(dataset)

    net = ToCoNet(cfg)
    optimizer = torch.optim.AdamW(
        net.trainable_parameters(),
        lr=cfg.lr_floor,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    data_rng = torch.Generator().manual_seed(cfg.seed + 1)
    crop_rng = torch.Generator().manual_seed(cfg.seed + 2)

    ckpt_dir = out_dir / "checkpoints"
    rows = [METRICS_HEADER]
    n = images_all.shape[0]
    for t in range(cfg.total_iters):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=data_rng)
        breakdown = train_step(
            net, optimizer, images_all[idx], labels_all[idx], cfg, crop_rng, t
        )
        parts = breakdown.detached()
        rows.append(
            f"{t},{parts['l_cls']:.8e},{parts['l_cls_aux']:.8e},{parts['l_ptc']:.8e},"
            f"{parts['l_ctc']:.8e},{parts['l_seg']:.8e},{parts['total']:.8e},"
            f"{lr_schedule(t, cfg):.8e}"
        )
        if verbose and (t % 200 == 0 or t == cfg.total_iters - 1):
            print(f"iter {t}: total={parts['total']:.4f} cls={parts['l_cls']:.4f}")
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            save_model(ckpt_dir / f"iter_{t + 1:06d}", net, cfg)

    save_model(ckpt_dir / "final", net, cfg)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text("\n".join(rows) + "\n")
    return TrainResult(net=net, metrics_path=metrics_path, checkpoint_dir=ckpt_dir, config=cfg)
