"""Command-line entry points for the full pipeline.

Commands: generate, train, fuse, propose, eval, query, ablate. All read
one JSON config (per-command sections, unknown keys rejected); --seed,
--out, --mode, and --deterministic override the config. Exit codes:
0 success, 1 validation error, 2 numeric failure.
"""

import argparse
import json
import sys

from . import pipeline
from .ablate import AblationConfig, run_ablation, write_ablation_report
from .pipeline import ConfigError, MissingArtifact, PipelineConfig
from .train import TrainingDiverged

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openfield",
        description="Open-vocabulary 3D feature field pipeline")
    parser.add_argument("command",
                        choices=["generate", "train", "fuse", "propose",
                                 "eval", "query", "ablate"])
    parser.add_argument("--config", help="JSON pipeline config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out", help="override output directory")
    parser.add_argument("--mode", choices=["sample", "render_project"],
                        help="segmentation mode for eval")
    parser.add_argument("--deterministic", action="store_true",
                        help="force reproducible output formatting")
    return parser


def _load_config(args) -> PipelineConfig:
    if args.config:
        cfg = pipeline.load_config(args.config)
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _run_ablate(cfg: PipelineConfig) -> list:
    import dataclasses
    import os

    os.makedirs(cfg.output_dir, exist_ok=True)
    section = dataclasses.asdict(cfg.ablate)
    section["density_resolution"] = tuple(section["density_resolution"])
    section["feature_resolution"] = tuple(section["feature_resolution"])
    acfg = AblationConfig(seed=cfg.seed, **section)
    report = run_ablation(acfg, progress=lambda msg: print(msg, flush=True))
    paths = write_ablation_report(cfg.output_dir, report)
    pipeline.record_artifacts(cfg.output_dir, "ablate", paths)
    for variant in ("sampled", "render_project", "depth", "novel_views",
                    "random_views"):
        print(f"{variant}: mIoU={report.miou[variant]:.4f} "
              f"mAcc={report.macc[variant]:.4f}")
    for name, ok in report.checks.items():
        print(f"check {name}: {'pass' if ok else 'FAIL'}")
    return paths


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "generate":
            paths = pipeline.stage_generate(cfg)
        elif args.command == "train":
            paths = pipeline.stage_train(cfg)
        elif args.command == "fuse":
            paths = pipeline.stage_fuse(cfg)
        elif args.command == "propose":
            paths = pipeline.stage_propose(cfg)
        elif args.command == "eval":
            paths = pipeline.stage_eval(cfg, mode=args.mode)
        elif args.command == "query":
            paths = pipeline.stage_query(cfg)
        else:
            paths = _run_ablate(cfg)
        print(json.dumps({"command": args.command, "outputs": paths},
                         indent=2))
        return EXIT_OK
    except (ConfigError, MissingArtifact, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDiverged as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
