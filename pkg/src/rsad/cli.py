"""Command line entry point: simulate, train, infer, eval, synth."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .fixtures import generate_fixture_suite
from .pipeline import TrainConfig, evaluate, infer, train
from .checkpoint import load_checkpoint
from .raster import (
    AnomalyMap,
    Raster,
    SceneSpec,
    export_png,
    read_raster,
    synth_scene,
    write_raster,
)
from .simulate import SimConfig, build_object_bank, simulate_spatial, simulate_spectral


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsad",
                                     description="remote-sensing anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--suite", action="store_true",
                      help="generate the full training/heldout/bank suite")
    what.add_argument("--spec", help="JSON file with single-scene parameters")

    p = sub.add_parser("simulate", help="simulate one anomaly sample from a scene")
    p.add_argument("--input", required=True, help="scene container directory")
    p.add_argument("--domain", required=True, choices=("spectral", "spatial"))
    p.add_argument("--bank", help="object bank directory (spatial only)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-large", action="store_true",
                   help="skip large-object simulation")

    p = sub.add_parser("train", help="train a detector from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output directory")

    p = sub.add_parser("infer", help="score a raster with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("tiled", "whole"), default="tiled")
    p.add_argument("--tile", type=int, default=224)
    p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True, help="anomaly map container directory")
    p.add_argument("--gt", required=True, help="labeled scene container directory")
    return parser


def _cmd_synth(args) -> int:
    if args.suite:
        generate_fixture_suite(args.out, seed=args.seed)
        print(str(Path(args.out) / "manifest.json"))
        return 0
    raw = json.loads(Path(args.spec).read_text())
    raw.setdefault("seed", args.seed)
    spec = SceneSpec(**raw)
    raster, labels = synth_scene(spec)
    write_raster(raster, args.out, labels)
    print(args.out)
    return 0


def _cmd_simulate(args) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = SimConfig()
    raster, labels = read_raster(args.input)
    if args.domain == "spectral":
        sample = simulate_spectral(raster, cfg, rng, include_large=not args.no_large)
    else:
        if not args.bank:
            print("error: --bank is required for the spatial domain", file=sys.stderr)
            return 2
        bank = build_object_bank(args.bank)
        sample = simulate_spatial(raster, labels, bank, cfg, rng,
                                  include_large=not args.no_large)
    write_raster(sample.raster, args.out, sample.labels)
    print(args.out)
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    train(cfg)
    print(str(Path(cfg.out_dir) / "checkpoint.bin"))
    return 0


def _cmd_infer(args) -> int:
    raster, _ = read_raster(args.input)
    ckpt = load_checkpoint(args.ckpt)
    amap = infer(raster, ckpt, mode=args.mode, tile=args.tile, overlap=args.overlap)
    out = Path(args.out)
    write_raster(Raster(amap.values[None], "synthetic"), out)
    export_png(amap, out / "map.png")
    print(str(out))
    return 0


def _cmd_eval(args) -> int:
    pred, _ = read_raster(args.pred)
    if pred.bands != 1:
        print(f"error: prediction must be a single-band map, got {pred.bands} bands",
              file=sys.stderr)
        return 1
    _, gt = read_raster(args.gt)
    if gt is None:
        print(f"error: {args.gt} has no labels.bin", file=sys.stderr)
        return 1
    result = evaluate(AnomalyMap(pred.values[0]), gt)
    print(result.to_json())
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
}


def run_cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures exit 1, with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
