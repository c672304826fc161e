"""``zsep`` command-line harness.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 acceptance assertion failed. ``ZSEP_LOG`` sets the log level (name or number).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from zsep.cli.checkpoint import CheckpointError
from zsep.cli.commands import (AcceptanceError, cmd_ablate_prompts, cmd_capacity_sweep, cmd_report, cmd_roundtrip,
                               cmd_separate, cmd_sweep_omega, cmd_train, summary_json)
from zsep.cli.config import ConfigError, load_config, with_overrides

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4

log = logging.getLogger("zsep")


def _setup_logging() -> None:
    level = os.environ.get("ZSEP_LOG", "WARNING").strip().upper()
    value = int(level) if level.isdigit() else getattr(logging, level, logging.WARNING)
    logging.basicConfig(level=value, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--steps", type=int, help="number of sampling steps")
    common.add_argument("--sampler", choices=("ddim", "ddpm"))
    common.add_argument("--omega", type=float, help="guidance weight")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (results are order-stable)")

    p = argparse.ArgumentParser(prog="zsep", description="Zero-shot separation by inversion and guided re-denoising.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train or fit the denoiser, write model.zsep")
    sp = sub.add_parser("separate", parents=[common], help="separate one mixture into its targets")
    sp.add_argument("--model", help="model checkpoint (trained from config when omitted)")
    sp.add_argument("--grid", help="ZSEP file with the mixture grid record")
    sp.add_argument("--grid-name", help="name of the grid record to read")
    sp.add_argument("--scene", type=int, default=0, help="configured scene index to separate")
    sp.add_argument("--target", action="append", help="target condition (label id or key); repeatable")
    sw = sub.add_parser("sweep-omega", parents=[common], help="metrics over the guidance-weight grid")
    sw.add_argument("--model")
    sw.add_argument("--assert-peak", action="store_true",
                    help="exit 4 unless medians rise up to omega=1 and drop at the largest omega")
    ab = sub.add_parser("ablate-prompts", parents=[common], help="c_inv / c_rev prompt ablation")
    ab.add_argument("--model")
    rt = sub.add_parser("roundtrip", parents=[common], help="inversion round-trip errors vs steps")
    rt.add_argument("--model")
    sub.add_parser("capacity-sweep", parents=[common], help="denoiser width vs separation quality")
    sub.add_parser("report", parents=[common], help="summarize result tables in --out as report.md")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, steps=args.steps, sampler=args.sampler,
                             omega=args.omega, out=args.out)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        model = getattr(args, "model", None)
        if args.verb == "train":
            res = cmd_train(cfg)
        elif args.verb == "separate":
            res = cmd_separate(cfg, model_path=model, grid_path=args.grid, grid_name=args.grid_name,
                               scene_index=args.scene, targets=args.target)
            res = {k: v for k, v in res.items() if k != "rows"}
        elif args.verb == "sweep-omega":
            res = cmd_sweep_omega(cfg, model_path=model, assert_peak=args.assert_peak)
        elif args.verb == "ablate-prompts":
            res = cmd_ablate_prompts(cfg, model_path=model)
        elif args.verb == "roundtrip":
            res = cmd_roundtrip(cfg, model_path=model)
        elif args.verb == "capacity-sweep":
            res = cmd_capacity_sweep(cfg, jobs=args.jobs)
            res = {k: v for k, v in res.items() if k != "rows"}
        else:
            res = cmd_report(cfg)
    except AcceptanceError as exc:
        log.error("acceptance assertion failed: %s", exc)
        return EXIT_ACCEPTANCE
    except (FloatingPointError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ValueError, KeyError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    print(summary_json(res))
    return EXIT_OK


def main(argv=None) -> None:
    _setup_logging()
    sys.exit(run(argv))
