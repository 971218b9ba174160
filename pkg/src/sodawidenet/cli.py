"""Command-line harness: training, evaluation, prediction export, comparison
grids, and dataset building."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import metrics
from .config import ModelConfig, preset
from .data import DatasetManifest, build_coco_manifest, build_duts_manifest, load_mask
from .predict import predict, report_grid
from .train import plan_for_phase, train

log = logging.getLogger("soda")

# Config files are flat "key: value" lines mirroring the train-plan fields;
# the LR schedule is written as trigger:multiplier pairs, e.g. "15:0.5,20:0.1".
_PLAN_KEYS = {"epochs": int, "lr0": float, "beta": float, "seed": int,
              "batch_size": int, "variant": str}


def parse_flat_config(path) -> dict:
    values: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = ":" if ":" in line else "="
        key, _, val = line.partition(sep)
        key, val = key.strip(), val.strip()
        if key in _PLAN_KEYS:
            values[key] = _PLAN_KEYS[key](val)
        elif key == "lr_schedule":
            pairs = []
            for part in val.split(","):
                trigger, mult = part.split(":")
                pairs.append((int(trigger), float(mult)))
            values[key] = tuple(pairs)
        elif key == "ablation":
            values[key] = frozenset(v.strip() for v in val.split(",") if v.strip())
        elif key == "input_size":
            h, w = (int(v) for v in val.replace("x", ",").split(","))
            values[key] = (h, w)
        elif key == "phase":
            values[key] = val
        else:
            raise ValueError(f"unknown config key {key!r} in {path}")
    return values


def _cmd_train(args) -> int:
    overrides = parse_flat_config(args.config) if args.config else {}
    overrides.pop("phase", None)
    input_size = overrides.pop("input_size", None)
    if args.variant:
        overrides["variant"] = args.variant
    ablation = set(overrides.pop("ablation", frozenset()))
    for flag in args.ablate or []:
        ablation.update(f.strip() for f in flag.split(",") if f.strip())
    if ablation:
        overrides["ablation"] = frozenset(ablation)
    env_seed = os.environ.get("SODA_SEED")
    if env_seed is not None:
        overrides["seed"] = int(env_seed)
    plan = plan_for_phase(args.phase, **overrides)

    config = preset(plan.variant)
    if input_size:
        import dataclasses
        config = dataclasses.replace(config, input_size=input_size)
    manifest = DatasetManifest.load(args.manifest)
    record = train(plan, manifest, args.out, resume=args.resume,
                   model_config=config, max_steps=args.max_steps)
    print(f"trained {record.steps} steps; final loss {record.final_loss:.4f}; "
          f"checkpoints under {args.out}")
    return 0


def _pair_dirs(pred_dir: Path, gt_dir: Path):
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.is_file()}
    for pred_path in sorted(pred_dir.iterdir()):
        gt_path = gts.get(pred_path.stem)
        if gt_path is None:
            log.warning("no ground truth for %s; skipping", pred_path.name)
            continue
        pred = load_mask(pred_path)
        gt = load_mask(gt_path)
        if pred.shape != gt.shape:
            from PIL import Image
            import numpy as np
            with Image.open(pred_path) as img:
                img = img.convert("L").resize((gt.shape[1], gt.shape[0]), Image.BILINEAR)
                pred = np.asarray(img, dtype=np.float32) / 255.0
        yield pred, gt


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    report = metrics.evaluate_pairs(_pair_dirs(pred_dir, gt_dir), dataset=gt_dir.name)
    base = Path(args.out)
    if base.suffix in {".json", ".md", ".csv"}:
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(metrics.reports_to_json([report]))
    base.with_suffix(".md").write_text(metrics.reports_to_markdown([report]))
    base.with_suffix(".csv").write_text(metrics.reports_to_csv([report]))
    print(metrics.reports_to_markdown([report]), end="")
    return 0


def _cmd_predict(args) -> int:
    written = predict(args.checkpoint, args.images, args.out)
    print(f"wrote {len(written)} saliency maps to {args.out}")
    return 0


def _cmd_grid(args) -> int:
    images_dir = Path(args.images)
    pred_specs = []
    for spec in args.pred or []:
        name, _, directory = spec.partition("=")
        pred_specs.append((name if directory else Path(name).name,
                           Path(directory or name)))
    labels = ["image"] + (["gt"] if args.gt else []) + [name for name, _ in pred_specs]
    rows = []
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
            continue
        row = [img_path]
        if args.gt:
            gt_path = Path(args.gt) / f"{img_path.stem}.png"
            row.append(gt_path if gt_path.exists() else None)
        for _, directory in pred_specs:
            p = directory / f"{img_path.stem}.png"
            row.append(p if p.exists() else None)
        rows.append(row)
        if args.rows and len(rows) >= args.rows:
            break
    size = report_grid(rows, args.out, labels=labels)
    print(f"wrote {size[0]}x{size[1]} grid to {args.out}")
    return 0


def _cmd_data(args) -> int:
    if args.data_command == "build-coco":
        manifest = build_coco_manifest(args.ann, args.images, args.out)
    else:
        manifest = build_duts_manifest(args.root, args.out)
    print(f"wrote manifest with {len(manifest)} entries to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training phase")
    p.add_argument("--phase", choices=("pretrain", "finetune"), required=True)
    p.add_argument("--variant", choices=("full", "medium", "small", "m", "s"),
                   help="model variant preset")
    p.add_argument("--config", help="flat key:value config file overriding plan fields")
    p.add_argument("--manifest", required=True, help="dataset manifest (jsonl)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--ablate", action="append",
                   help="ablation flag (repeatable or comma separated)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None, help="cap total steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a directory of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report base path (.json/.md/.csv written)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="export saliency maps for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("grid", help="tile a qualitative comparison grid")
    p.add_argument("--images", required=True)
    p.add_argument("--gt")
    p.add_argument("--pred", action="append", help="NAME=DIR prediction column")
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("data", help="dataset building")
    dsub = p.add_subparsers(dest="data_command", required=True)
    pc = dsub.add_parser("build-coco", help="binarize instance annotations")
    pc.add_argument("--ann", required=True, help="instance annotation json")
    pc.add_argument("--images", required=True, help="image directory")
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=_cmd_data)
    pd = dsub.add_parser("build-duts", help="index a DUTS-style dataset")
    pd.add_argument("--root", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=_cmd_data)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
