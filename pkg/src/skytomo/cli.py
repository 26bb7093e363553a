"""``skytomo`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PipelineConfig, apply_override, demo_config, from_dict, load_config, to_dict
from .errors import SkytomoError

COMMANDS = ("gen", "render", "train-layer", "train-refine", "infer", "wind", "eval", "demo")


def _parser():
    ap = argparse.ArgumentParser(prog="skytomo", description="Multi-view cloud tomography pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or TOML configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train1.steps=100")
        p.add_argument("--output", help="output root directory")
        p.add_argument("--seed", type=int, help="master seed")
        if name == "infer":
            p.add_argument("--no-refine", action="store_true",
                           help="write the lifted layer grid without the refiner")
        if name == "wind":
            p.add_argument("--truth", action="store_true",
                           help="track the ground-truth sequence instead of reconstructions")
        if name == "demo":
            p.add_argument("--steps-1", type=int, help="stage-1 training steps")
            p.add_argument("--steps-2", type=int, help="stage-2 training steps")
    return ap


def _config(args) -> PipelineConfig:
    overrides = list(args.set)
    if args.output:
        overrides.append(f"output={json.dumps(args.output)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.command == "demo":
        if getattr(args, "steps_1", None) is not None:
            overrides.append(f"train1.steps={args.steps_1}")
        if getattr(args, "steps_2", None) is not None:
            overrides.append(f"train2.steps={args.steps_2}")
        if not args.config:
            data = to_dict(demo_config())
            for item in overrides:
                apply_override(data, item)
            return from_dict(PipelineConfig, data).validate()
    return load_config(args.config, overrides)


def run(args):
    from . import pipeline as pl

    cfg = _config(args)
    cmd = args.command
    if cmd == "gen":
        pl.run_gen(cfg)
    elif cmd == "render":
        pl.run_render(cfg)
    elif cmd == "train-layer":
        pl.run_train_layer(cfg)
    elif cmd == "train-refine":
        pl.run_train_refine(cfg)
    elif cmd == "infer":
        pl.run_infer(cfg, use_refiner=not args.no_refine)
    elif cmd == "wind":
        pl.run_wind(cfg, use_truth=args.truth)
    elif cmd == "eval":
        radar, maps, _ = pl.run_eval(cfg)
        print(json.dumps({"radar": radar.to_dict(), "map": maps.to_dict()}, indent=2, sort_keys=True))
    elif cmd == "demo":
        summary = pl.run_demo(cfg)
        print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except SkytomoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
