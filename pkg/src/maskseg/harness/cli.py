"""Command-line interface: ``maskseg {synth,train,infer,eval,bench}``.

User errors end the process with a one-line message on stderr and exit
status 2.  The default seed is 0 unless the ``MFRT_SEED`` environment
variable is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..config import ConfigError, ModelConfig, TrainConfig, toy_config
from ..loss import MatchingError
from .bench import benchmark_latency
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cost import count_flops
from .data import (DataError, default_classes, generate_synthetic_dataset, read_dataset,
                   read_metadata, read_ppm, write_dataset, write_pgm16)
from .evaluate import evaluate, infer_panoptic, infer_semantic
from .train import DivergenceError, train_toy

USER_ERRORS = (ConfigError, DataError, CheckpointError, MatchingError, DivergenceError,
               OSError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def default_seed() -> int:
    raw = os.environ.get("MFRT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MFRT_SEED must be an integer, got {raw!r}") from None


def load_configs(source: str | None, num_classes: int | None = None) -> tuple:
    """``source`` is a JSON file, ``toy``, ``default`` or None (toy).

    A JSON file may hold model keys at top level or ``{"model": {...},
    "train": {...}}``.
    """
    train: dict = {}
    if source in (None, "toy"):
        model = toy_config(**({"num_classes": num_classes} if num_classes else {}))
    elif source == "default":
        model = ModelConfig(**({"num_classes": num_classes} if num_classes else {}))
    else:
        try:
            data = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: expected a JSON object")
        if "model" in data or "train" in data:
            extra = set(data) - {"model", "train"}
            if extra:
                raise ConfigError(f"{source}: unknown sections {sorted(extra)}")
            model_data, train = data.get("model", {}), data.get("train", {})
        else:
            model_data = data
        if num_classes and "num_classes" not in model_data:
            model_data = dict(model_data, num_classes=num_classes)
        model = ModelConfig.from_dict(model_data)
    return model, TrainConfig.from_dict(train)


def _emit(args, payload: dict, text: str) -> None:
    print(text)
    if getattr(args, "json", None):
        Path(args.json).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    records = generate_synthetic_dataset(args.seed, args.count, args.size, args.classes,
                                         args.max_instances)
    write_dataset(args.out, records)
    _emit(args, {"records": len(records), "out": str(args.out)},
          f"wrote {len(records)} records to {args.out}")


def cmd_train(args) -> None:
    records = read_dataset(args.data)
    K = len(records[0].classes)
    model_cfg, train_cfg = load_configs(args.config, K)
    if model_cfg.num_classes != K:
        raise ConfigError(f"config has {model_cfg.num_classes} classes, dataset has {K}")
    changes = {}
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.seed is not None:
        changes["seed"] = args.seed
        model_cfg = model_cfg.replace(seed=args.seed)
    train_cfg = dataclasses.replace(train_cfg, **changes)
    result = train_toy(model_cfg, records, train_cfg)
    save_checkpoint(args.out, result.model)
    final = result.losses[-1] if result.losses else float("nan")
    _emit(args, {"steps": result.steps, "losses": result.losses, "checkpoint": str(args.out)},
          f"trained {result.steps} steps, final loss {final:.5f}, checkpoint {args.out}")


def _classes_for(args, K: int):
    if args.meta:
        classes, _ = read_metadata(args.meta)
        if len(classes) != K:
            raise DataError(f"{args.meta} lists {len(classes)} classes, model has {K}")
        return classes
    return default_classes(K)


def cmd_infer(args) -> None:
    model = load_checkpoint(args.ckpt)
    image = read_ppm(args.image)
    out = Path(args.out)
    if args.task == "semantic":
        labels = infer_semantic(model, image)
        write_pgm16(out, labels)
        _emit(args, {"task": "semantic", "shape": list(labels.shape), "out": str(out)},
              f"wrote {labels.shape[0]}x{labels.shape[1]} semantic labels to {out}")
        return
    classes = _classes_for(args, model.config.num_classes)
    pan = infer_panoptic(model, image, classes)
    write_pgm16(out, pan.segment_ids)
    table = {"segments": [{"id": s.segment_id, "category_id": s.class_id,
                           "isthing": s.is_thing, "area": s.pixel_count} for s in pan.segments]}
    sidecar = out.with_name(out.name + ".json")
    sidecar.write_text(json.dumps(table, indent=2) + "\n")
    _emit(args, {"task": "panoptic", **table, "out": str(out)},
          f"wrote {len(pan.segments)} segments to {out} (table in {sidecar})")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.ckpt)
    records = read_dataset(args.data)
    if len(records[0].classes) != model.config.num_classes:
        raise DataError(f"dataset has {len(records[0].classes)} classes, "
                        f"model has {model.config.num_classes}")
    cm, pq = evaluate(model, records, args.workers)
    if args.task == "semantic":
        iou = cm.iou()
        value = cm.miou()
        lines = [f"mIoU {100 * value:.2f}"]
        lines += [f"  {c.name:<12}{'-' if np.isnan(v) else f'{100 * v:.2f}'}"
                  for c, v in zip(records[0].classes, iou)]
        _emit(args, {"miou": value, "per_class_iou": [None if np.isnan(v) else float(v) for v in iou]},
              "\n".join(lines))
        return
    res = pq.result()
    _emit(args, json.loads(res.to_json()), res.table())


def cmd_bench(args) -> None:
    config, _ = load_configs(args.config)
    H, W = args.resolution
    cost = count_flops(config, H, W)
    stats = benchmark_latency(config, (H, W), args.iterations, args.warmup)
    payload = {"resolution": [H, W], "total_flops": cost.total_flops,
               "per_module_flops": cost.per_module_flops, "total_params": cost.total_params,
               "per_module_params": cost.per_module_params, "latency": stats.to_dict()}
    _emit(args, payload, f"resolution {H}x{W}\n{cost.report()}\n{stats.report()}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskseg", description="Two-stream mask-classification segmenter.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--json", metavar="FILE", help="also write the report as JSON")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=_size, default=(96, 96), metavar="HxW")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train on a dataset directory")
    p.add_argument("--config", help="JSON config file, 'toy' (default) or 'default'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=None)

    p = add("infer", cmd_infer, "predict one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--task", choices=("semantic", "panoptic"), default="semantic")
    p.add_argument("--meta", help="meta.txt with the class table (panoptic)")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("semantic", "panoptic"), default="panoptic")
    p.add_argument("--workers", type=int, default=1)

    p = add("bench", cmd_bench, "print cost profile and latency")
    p.add_argument("--config", help="JSON config file, 'toy' or 'default' (default)",
                   default="default")
    p.add_argument("--resolution", type=_size, default=(512, 512), metavar="HxW")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "seed", 0) is None and args.command == "synth":
            args.seed = default_seed()
        elif args.command == "train" and args.seed is None and "MFRT_SEED" in os.environ:
            args.seed = default_seed()
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"maskseg: usage error: {exc}", file=sys.stderr)
        return 2
    except USER_ERRORS as exc:
        message = exc.strerror if isinstance(exc, OSError) and exc.strerror else str(exc)
        where = f" ({exc.filename})" if isinstance(exc, OSError) and exc.filename else ""
        print(f"maskseg: error: {message}{where}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
