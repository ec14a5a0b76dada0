"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import OUT_ENV, PipelineConfig, config_from_dict, load_config
from .errors import ConfigError, DataError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

# flag name -> PathsConfig field
_PATH_FLAGS = {
    "calibration": "calibration", "detections": "detections", "ground_truth": "ground_truth",
    "manifest": "manifest", "clusters": "clusters", "tracklets": "tracklets", "tracks": "tracks",
    "trees": "trees", "timelines": "timelines", "songs": "songs", "birds": "birds",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON pipeline config")
    p.add_argument("--out", help=f"output directory (the {OUT_ENV} environment variable wins)")
    p.add_argument("--seed", type=int, help="global RNG seed")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aviarytrack", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scene, detections and the WILD manifest")
    _common(p)
    p.add_argument("--calibration", help="use these cameras instead of the default aviary rig")

    p = sub.add_parser("reconstruct", help="detections -> 3D cluster centres")
    _common(p)
    p.add_argument("--calibration")
    p.add_argument("--detections")

    p = sub.add_parser("track", help="cluster centres -> tracklets")
    _common(p)
    p.add_argument("--clusters")

    p = sub.add_parser("retrack", help="tracklets -> tracks and hypothesis trees")
    _common(p)
    p.add_argument("--tracklets")

    p = sub.add_parser("evaluate", help="score tracks on the WILD manifest")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--tracks")
    p.add_argument("--oracle", action="store_true", help="also score through the hypothesis trees")
    p.add_argument("--trees")
    p.add_argument("--tracklets")
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--head-scoring", action="store_true", help="score head points instead of body centres")

    p = sub.add_parser("ethogram", help="timelines + songs -> interactions, bonds, transitions")
    _common(p)
    p.add_argument("--tracks", dest="timelines", help="timeline CSV: frame, bird_id, x, y, z")
    p.add_argument("--songs")
    p.add_argument("--birds")

    p = sub.add_parser("run", help="run a chain of stages")
    _common(p)
    p.add_argument("--stages", help="FIRST:LAST, e.g. reconstruct:evaluate (default: all)")
    return ap


def _load(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.out:
        cfg.paths.out_dir = args.out
    if args.seed is not None:
        cfg.rng_seed = args.seed
    for flag, fieldname in _PATH_FLAGS.items():
        value = getattr(args, flag, None)
        if value:
            setattr(cfg.paths, fieldname, value)
    if args.command == "evaluate":
        if getattr(args, "oracle", False):
            cfg.evaluation.oracle = True
        elif args.config is None:
            cfg.evaluation.oracle = False
        if args.head_scoring:
            cfg.evaluation.head_scoring = True
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import run_pipeline

    try:
        cfg = _load(args)
        stages = args.stages if args.command == "run" else f"{args.command}:{args.command}"
        out = run_pipeline(cfg, stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.command == "evaluate":
        sys.stdout.write((out / "eval_greedy.txt").read_text())
        if cfg.evaluation.oracle:
            sys.stdout.write((out / "eval_oracle.txt").read_text())
    print(f"outputs in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
