"""Command-line interface: generate / train / eval / predict / ablate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .checkpoint import load_checkpoint, restore_model
from .config import ExperimentConfig
from .pipeline import DivideAndConquerModel, infer
from .synth import SynthSpec, synth_generate
from .train import (
    evaluate_model,
    format_ablation_table,
    load_test_data,
    run_ablation,
    run_training,
    to_tensor,
)


def _add_common(parser):
    parser.add_argument("--config", type=Path, help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--device", default="cpu", help="compute device")
    parser.add_argument("--out", type=Path, help="output directory")


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        config = ExperimentConfig.load(args.config)
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.out_dir = str(args.out)
    return config


def _model_from_checkpoint(path, device="cpu"):
    payload = load_checkpoint(path)
    config = ExperimentConfig.from_dict(payload["config"])
    model = DivideAndConquerModel(config.model).to(device)
    restore_model(payload, model)
    model.eval()
    return model, config


def cmd_generate(args) -> int:
    config = _load_config(args)
    spec = config.data.synth if config.data.synth is not None else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = args.out if args.out is not None else Path(config.data.root or "synth_data")
    manifests = synth_generate(spec, out)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    model, history, ckpt_path = run_training(config, log_stream=sys.stdout)
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    model, config = _model_from_checkpoint(args.checkpoint, args.device)
    root = args.data if args.data is not None else config.data.root
    data = load_test_data(root, config.data.input_size, split=args.split)
    report = evaluate_model(model, data)
    out_dir = Path(args.out) if args.out is not None else Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "metrics.json"
    report.save(report_path)
    print(report.format_table())
    print(f"report: {report_path}")
    return 0


def cmd_predict(args) -> int:
    model, config = _model_from_checkpoint(args.checkpoint, args.device)
    try:
        with Image.open(args.image) as img:
            img = img.convert("RGB").resize(
                (config.data.input_size, config.data.input_size), Image.BILINEAR)
            array = np.asarray(img, dtype=np.uint8)[None]
    except (UnidentifiedImageError, OSError) as exc:
        print(f"error: cannot read image {args.image}: {exc}", file=sys.stderr)
        return 2
    with torch.no_grad():
        result = infer(model, to_tensor(array))[0]
    record = {"phi": result.phi, "routed": result.routed}
    if config.task == "detect":
        record["detections"] = [
            {"box": list(d.box), "category": d.category, "score": d.score}
            for d in result.detections]
    else:
        record["category_scores"] = result.category_scores
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    results = run_ablation(config, variants, log_stream=sys.stdout)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_ablation_table(results)
    print(table)
    payload = {v: results[v]["summary"] for v in results if v in variants}
    if "delta_full_vs_no_pipeline" in results:
        payload["delta_full_vs_no_pipeline"] = results["delta_full_vs_no_pipeline"]
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    for v in variants:
        results[v]["report"].save(out_dir / f"metrics_{v}.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raygate",
        description="Gated prohibited-item recognition pipeline for X-ray scans")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model from a config")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset root (defaults to config)")
    p.add_argument("--split", default="all",
                   choices=["easy", "hard", "hidden", "normal", "all"])
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="run one image through a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--device", default="cpu")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare pipeline variants")
    _add_common(p)
    p.add_argument("--variants", default="full,no_normals,no_pipeline,no_dam")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
