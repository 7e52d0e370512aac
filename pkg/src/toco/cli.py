"""Command-line entry point: train / eval / diagnose / ablate / gen-data.

The TOCO_THREADS environment variable caps worker parallelism (it is also
used as the torch intra-op thread count; 1 keeps runs fast and
deterministic at desk scale).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from .config import PRESETS, TrainConfig, get_preset
from .data import export_dataset, gen_shapes_dataset, load_dir_dataset
from .diagnostics import (
    blockwise_similarity,
    evaluate_checkpoint,
    render_cam,
    render_class_attention,
    render_similarity_curve,
    run_ablation,
)
from .train import load_model, train


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
    else:
        cfg = get_preset(args.preset)
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not _:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _eval_dataset(args, cfg: TrainConfig):
    if args.data:
        ds = load_dir_dataset(args.data)
        if not ds:
            raise SystemExit(f"no samples found under {args.data}")
        return ds
    return gen_shapes_dataset(
        args.eval_samples, cfg.num_classes, cfg.vit.image_size, seed=args.eval_seed
    )


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--config", type=Path, help="JSON config path (overrides preset)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("runs/out"))
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="config override, e.g. --set lambda_ptc=0 --set vit.depth=4",
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="toco")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the single-stage training loop")
    _add_common(p_train)
    p_train.add_argument("--data", type=Path, help="directory dataset; default is synthetic")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--data", type=Path)
    p_eval.add_argument("--eval-samples", type=int, default=64)
    p_eval.add_argument("--eval-seed", type=int, default=123456)
    p_eval.add_argument("--out", type=Path)

    p_diag = sub.add_parser("diagnose", help="similarity curve and renders")
    p_diag.add_argument("--checkpoint", type=Path, required=True)
    p_diag.add_argument("--data", type=Path)
    p_diag.add_argument("--eval-samples", type=int, default=32)
    p_diag.add_argument("--eval-seed", type=int, default=123456)
    p_diag.add_argument("--out", type=Path, default=Path("runs/diagnose"))
    p_diag.add_argument("--renders", type=int, default=4)

    p_abl = sub.add_parser("ablate", help="train/evaluate a hyperparameter grid")
    _add_common(p_abl)
    p_abl.add_argument("--grid", type=Path, required=True,
                       help='JSON file: {"axes": {...}, "seeds": [...]}')
    p_abl.add_argument("--eval-samples", type=int, default=64)
    p_abl.add_argument("--eval-seed", type=int, default=123456)

    p_gen = sub.add_parser("gen-data", help="export a synthetic shapes dataset")
    p_gen.add_argument("--out", type=Path, required=True)
    p_gen.add_argument("--n", type=int, default=256)
    p_gen.add_argument("--classes", type=int, default=3)
    p_gen.add_argument("--size", type=int, default=64)
    p_gen.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, int(os.environ.get("TOCO_THREADS", "1"))))

    if args.command == "train":
        cfg = _build_config(args)
        dataset = load_dir_dataset(args.data) if args.data else None
        result = train(cfg, args.out, dataset=dataset, verbose=not args.quiet)
        print(f"metrics: {result.metrics_path}")
        print(f"checkpoints: {result.checkpoint_dir}")
        return 0

    if args.command == "eval":
        _, cfg = load_model(args.checkpoint)
        dataset = _eval_dataset(args, cfg)
        reports = evaluate_checkpoint(args.checkpoint, dataset)
        payload = {
            key: {"miou": rep.miou, "per_class_iou": rep.per_class_iou.tolist()}
            for key, rep in reports.items()
        }
        text = json.dumps(payload, indent=1)
        print(text)
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "eval.json").write_text(text)
        return 0

    if args.command == "diagnose":
        net, cfg = load_model(args.checkpoint)
        net.eval()
        dataset = _eval_dataset(args, cfg)
        values = blockwise_similarity(net, dataset, sample_limit=args.eval_samples)
        args.out.mkdir(parents=True, exist_ok=True)
        csv = "\n".join(["block,mean_pairwise_cosine"]
                        + [f"{i + 1},{v:.6f}" for i, v in enumerate(values)])
        (args.out / "block_similarity.csv").write_text(csv + "\n")
        render_similarity_curve({"model": values}, args.out / "block_similarity.png")
        for i, sample in enumerate(dataset[: args.renders]):
            render_cam(sample, net, args.out / f"sample{i:02d}")
            render_class_attention(sample, net, args.out / f"sample{i:02d}")
        print(f"wrote diagnostics to {args.out}")
        return 0

    if args.command == "ablate":
        cfg = _build_config(args)
        grid = json.loads(args.grid.read_text())
        eval_ds = gen_shapes_dataset(
            args.eval_samples, cfg.num_classes, cfg.vit.image_size, seed=args.eval_seed
        )
        csv_path = run_ablation(
            cfg, grid.get("axes", {}), grid.get("seeds", [cfg.seed]), args.out, eval_ds
        )
        print(f"ablation results: {csv_path}")
        return 0

    if args.command == "gen-data":
        samples = gen_shapes_dataset(args.n, args.classes, args.size, seed=args.seed)
        export_dataset(samples, args.out)
        print(f"wrote {len(samples)} samples to {args.out}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
