"""Command-line entry point.

Exit codes: 0 ok, 1 training diverged, 2 configuration error, 3 data or I/O
error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .config import describe_keys, load_run_config
from .errors import CheckpointError, ConfigError, DatasetError, InvalidInputError, TrainingError

EXIT_OK, EXIT_TRAIN, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "SHARECMP_OUTPUT_ROOT"

log = logging.getLogger("sharecmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _keys_epilog() -> str:
    rows = describe_keys()
    width = max(len(k) for k, _ in rows)
    lines = ["config keys (override with --<key>=<value>; lists as comma-separated values):"]
    lines += [f"  {k:<{width}}  default {v}" for k, v in rows]
    return "\n".join(lines)


def _parse_overrides(extra: Sequence[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"override {tok} needs a value") from None
        if "." not in key and key != "preset":
            raise ConfigError(f"unknown option {tok!r}")
        overrides[key] = value
    return overrides


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def cmd_train(args, extra) -> int:
    cfg = load_run_config(args.config, _parse_overrides(extra))
    out = Path(args.out) if args.out else _default_out("train")
    from .harness import train

    result = train(cfg, out)
    last = next((h for h in reversed(result.history) if "loss" in h), {})
    print(f"trained {len([h for h in result.history if 'loss' in h])} steps; final loss {last.get('loss', float('nan')):.4f}")
    if result.eval is not None:
        print(f"mIoU ({cfg.data.val_split or cfg.data.train_split}): {100 * result.eval.miou:.2f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics log: {out / 'metrics.jsonl'}")
    return EXIT_OK


def _export_predictions(out_dir: Path, model, index, palette):
    from .data import collate, load_sample
    from .decoder import predict

    out_dir.mkdir(parents=True, exist_ok=True)
    representation = model.cfg.pga.representation if model.cfg.pga.bypass else None
    model.eval()
    with torch.no_grad():
        for sid in index.ids:
            batch = collate([load_sample(index, sid)], representation=representation)
            pred = predict(model(batch["rgb"], batch["angles"], batch["representations"]).logits)[0].numpy()
            Image.fromarray(pred.astype(np.uint8)).save(out_dir / f"{sid}.png")
            Image.fromarray(palette[pred]).save(out_dir / f"{sid}_color.png")


def cmd_eval(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    from .checkpoint import load_checkpoint
    from .data import DatasetIndex
    from .harness import evaluate

    model, _ = load_checkpoint(args.checkpoint)
    index = DatasetIndex.load(args.dataset, args.split).validate()
    if index.num_classes != model.num_classes:
        raise CheckpointError(
            f"checkpoint predicts {model.num_classes} classes but dataset has {index.num_classes}"
        )
    result = evaluate(model, index)
    print(result.table())
    report = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(f".{args.split}.eval.json")
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps({"checkpoint": str(args.checkpoint), "split": args.split, **result.to_dict()}, indent=2) + "\n")
    print(f"report: {report}")
    if args.predictions:
        _export_predictions(Path(args.predictions), model, index, index.class_palette())
    return EXIT_OK


def cmd_stokes_export(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    from .data import DatasetIndex, load_sample
    from .pga import angles_to_tensor
    from .polarization import RepresentationKind, compute_representation, compute_stokes, export_representation, to_uint8

    try:
        kinds = [RepresentationKind.parse(k) for k in args.kinds.split(",") if k.strip()]
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None
    index = DatasetIndex.load(args.input_dir, args.split)
    if index.modality != "angles":
        raise DatasetError(f"{args.input_dir} does not hold four-angle images")
    index.validate()
    model = None
    if args.checkpoint:
        from .checkpoint import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        model.eval()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for sid in index.ids:
        sample = load_sample(index, sid)
        stokes = compute_stokes(sample.polarized)
        for kind in kinds:
            export_representation(compute_representation(stokes, kind), out / f"{sid}_{kind.value}.png")
            written += 1
        if model is not None:
            if model.cfg.pga.in_channels_per_angle != sample.polarized.shape[-1]:
                raise CheckpointError("checkpoint PGA channel count does not match the angle images")
            with torch.no_grad():
                ip = model.pga.generate(angles_to_tensor(sample.polarized))[0].permute(1, 2, 0).numpy()
            lo, hi = float(ip.min()), float(ip.max())
            unit = (ip - lo) / (hi - lo) if hi > lo else np.zeros_like(ip)
            Image.fromarray(to_uint8(unit)).save(out / f"{sid}_pga.png")
            written += 1
    print(f"wrote {written} images for {len(index.ids)} samples to {out}")
    return EXIT_OK


def cmd_params(args, extra) -> int:
    cfg = load_run_config(args.config, _parse_overrides(extra))
    from .params import count_params, format_report

    report = count_params(cfg.model, flops=args.flops)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(format_report(report))
    return EXIT_OK


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def cmd_gen_synth(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments: {' '.join(extra)}")
    from .data import SyntheticSceneSpec, generate_synthetic_dataset, load_sample

    values = {}
    if args.spec_path:
        try:
            values = json.loads(Path(args.spec_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthetic spec {args.spec_path}: {exc}") from None
    try:
        spec = SyntheticSceneSpec.from_dict(values)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    if args.n < 1:
        raise ConfigError("n must be >= 1")
    index = generate_synthetic_dataset(spec, args.n, args.out_dir, split=args.split)
    for sid in index.ids:
        load_sample(index, sid)
    print(f"split {index.split!r}: {len(index)} samples, {index.num_classes} classes ({', '.join(index.class_names)})")
    print(f"root: {index.root}")
    print(f"manifest sha256: {manifest_hash(index.root)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="sharecmp", description="Shared dual-branch RGB-P segmentation toolkit.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model", epilog=_keys_epilog(), formatter_class=fmt, allow_abbrev=False)
    p.add_argument("config", nargs="?", help="JSON run config")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/train or runs/train)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt, allow_abbrev=False)
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="dataset root holding manifest.json")
    p.add_argument("--split", default="val")
    p.add_argument("--report", help="JSON report path (default next to the checkpoint)")
    p.add_argument("--predictions", help="directory for class-id and color prediction PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stokes-export", help="write AoLP/DoLP/SAoLP/CAoLP (and PGA) images", formatter_class=fmt, allow_abbrev=False)
    p.add_argument("input_dir", help="dataset root in the four-angle layout")
    p.add_argument("out_dir")
    p.add_argument("--split", default="train")
    p.add_argument("--kinds", default="aolp,dolp,saolp,caolp")
    p.add_argument("--checkpoint", help="also export the PGA image from this checkpoint")
    p.set_defaults(func=cmd_stokes_export)

    p = sub.add_parser("params", help="parameter accounting vs a dual-branch baseline", epilog=_keys_epilog(), formatter_class=fmt, allow_abbrev=False)
    p.add_argument("config", nargs="?", help="JSON run config (default: b2 preset)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--flops", action="store_true", help="add an analytic FLOP estimate at 512x512")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gen-synth", help="generate a synthetic four-angle dataset", formatter_class=fmt, allow_abbrev=False)
    p.add_argument("spec_path", nargs="?", help="JSON synthetic scene spec (default spec when omitted)")
    p.add_argument("n", type=int)
    p.add_argument("out_dir")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen_synth)
    return parser


def _run(argv: Optional[Sequence[str]]) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DatasetError, InvalidInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


def main(argv: Optional[Sequence[str]] = None) -> int:
    return _run(argv)


if __name__ == "__main__":
    sys.exit(main())
