"""Command-line entry point: ``posekit <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .codec import AnnotationSet
from .errors import ConfigError, NumericalError, PosekitError
from .network import HEADS, NetworkConfig

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


def _network_config(args) -> NetworkConfig:
    cfg = NetworkConfig.load(args.config) if getattr(args, "config", None) else NetworkConfig()
    if getattr(args, "head", None):
        cfg = replace(cfg, head=args.head)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _train_config(args):
    from .train import TrainConfig

    kw = {}
    if args.train_config:
        raw = json.loads(Path(args.train_config).read_text())
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        kw.update(raw)
    for name in ("epochs", "batch_size", "base_lr", "max_steps"):
        val = getattr(args, name, None)
        if val is not None:
            kw[name] = val
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.no_augment:
        kw["augment"] = False
    kw["precision"] = args.precision
    if "input_size" in kw:
        kw["input_size"] = tuple(kw["input_size"])
    return TrainConfig(**kw)


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    return Path(path)


def cmd_synth(args) -> int:
    from .synth import SyntheticSpec, synth_generate

    out = _require(args.out, "out")
    spec = SyntheticSpec(occlusion_prob=args.occlusion) if args.occlusion is not None else SyntheticSpec()
    try:
        synth_generate(spec, args.count, args.seed or 0, out)
    except OSError as e:
        raise ConfigError(f"cannot write dataset to {out}: {e}") from e
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synth import load_dataset
    from .train import train

    data = load_dataset(_require(args.data, "data"))
    out = _require(args.out, "out")
    out.mkdir(parents=True, exist_ok=True)
    res = train(_network_config(args), _train_config(args), data, out_dir=out,
                log_path=out / "train_log.jsonl")
    last = res.history[-1] if res.history else {}
    print(f"trained {res.steps} steps; final loss {last.get('loss', float('nan')):.6f}; checkpoint in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_gradcheck

    if args.precision != "f64":
        raise ConfigError("gradcheck requires --precision f64")
    reports = run_gradcheck(args.scope, seed=args.seed or 0, max_entries=args.max_entries)
    worst = 0.0
    for r in reports:
        print("\n".join(r.lines()))
        worst = max(worst, r.max_rel_error)
    ok = worst < THRESHOLD
    print(f"overall max rel error {worst:.3e}: {'PASS' if ok else 'FAIL'} (threshold {THRESHOLD:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_predict(args) -> int:
    from .synth import load_dataset
    from .train import predict, read_model

    ckpt = _require(args.checkpoint, "checkpoint")
    cfg = _network_config(args) if args.config else None
    model = read_model(ckpt, cfg, args.precision)
    data = load_dataset(_require(args.data, "data"))
    preds = predict(model, data, flip=args.flip)
    out = _require(args.out, "out")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(preds))
    print(f"wrote {len(preds)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    preds = json.loads(_require(args.predictions, "predictions").read_text())
    ann = AnnotationSet.load(_require(args.annotations, "annotations"))
    report = evaluate(preds, ann)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.dumps())
        (out / "report.txt").write_text(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .synth import SyntheticSpec, in_memory_dataset, load_dataset
    from .train import ABLATION_VARIANTS, ablate, ablation_table

    seed = args.seed or 0
    if args.data:
        train_data = load_dataset(Path(args.data))
        val_data = load_dataset(Path(args.val_data)) if args.val_data else train_data
    else:
        train_data = in_memory_dataset(SyntheticSpec(), args.train_count, seed)
        val_data = in_memory_dataset(SyntheticSpec(), args.val_count, seed + 1)
    base = _network_config(args)
    if not args.config:
        base = replace(base, deconv_filters=args.deconv_filters)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {list(ABLATION_VARIANTS)}")
    out = Path(args.out) if args.out else None
    rows = ablate(base, _train_config(args), train_data, val_data, variants,
                  log_dir=out / "logs" if out else None)
    table = ablation_table(rows)
    print(table, end="")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, indent=1))
        (out / "ablation.txt").write_text(table)
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    from .synth import load_dataset
    from .tensor import save_blob
    from .train import read_model

    model = read_model(_require(args.checkpoint, "checkpoint"), None, args.precision)
    data = load_dataset(_require(args.data, "data"))
    out = _require(args.out, "out")
    out.mkdir(parents=True, exist_ok=True)
    x = data.images[: args.count].astype(model.parameters()[0].data.dtype)
    model.forward(x)
    written = 0
    for name, block in model.encoder.named_bottlenecks():
        fsm = block.fsm
        if fsm is None:
            continue
        for label, arr in (("alpha", fsm.alpha), ("beta", fsm.beta)):
            if arr is not None:
                save_blob(out / f"{name}_{label}.tns", np.ascontiguousarray(arr))
                written += 1
    print(f"wrote {written} attention tensors to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="network config file (key = value lines)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output path")
    common.add_argument("--flip", action="store_true", help="average with the mirrored input")
    common.add_argument("--head", choices=HEADS)
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    trainopts = argparse.ArgumentParser(add_help=False)
    trainopts.add_argument("--train-config", help="JSON file with TrainConfig fields")
    trainopts.add_argument("--epochs", type=int)
    trainopts.add_argument("--batch-size", type=int)
    trainopts.add_argument("--base-lr", type=float)
    trainopts.add_argument("--max-steps", type=int)
    trainopts.add_argument("--no-augment", action="store_true")

    p = argparse.ArgumentParser(prog="posekit", description="Pose heatmap network toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic stick-figure dataset")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--occlusion", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common, trainopts], help="train a network")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--scope", default="all", help="all, layers, fasm, end-to-end, or a case name")
    s.add_argument("--max-entries", type=int, default=None)
    s.set_defaults(func=cmd_gradcheck, precision="f64")

    s = sub.add_parser("predict", parents=[common], help="write a prediction dump")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="score predictions against annotations")
    s.add_argument("--predictions", required=True)
    s.add_argument("--annotations", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common, trainopts], help="train and compare component variants")
    s.add_argument("--val-data")
    s.add_argument("--variants", help="comma-separated subset")
    s.add_argument("--train-count", type=int, default=32)
    s.add_argument("--val-count", type=int, default=16)
    s.add_argument("--deconv-filters", type=int, default=32)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dump-attention", parents=[common], help="save channel and location weights")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=4)
    s.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PosekitError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
