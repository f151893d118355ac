"""Command line entry point: ``hybridrl run|report|dataset``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .comblock import ComblockConfig, fraction_optimal, generate_offline_dataset
from .errors import ConfigError
from .harness import ENV_OUT_DIR, ExperimentConfig, apply_env_overrides, run_experiment
from .plotting import render_report

log = logging.getLogger("hybridrl")


def _cmd_run(args) -> int:
    try:
        cfg = apply_env_overrides(ExperimentConfig.load(args.config))
    except (ConfigError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out = args.out or os.environ.get(ENV_OUT_DIR) or cfg.out_dir or "runs"
    seeds = [args.seed] if args.seed is not None else None
    outcome = run_experiment(cfg, out, seeds)
    for s in outcome.seeds:
        log.info("seed %d: %s after %d rounds, %d online samples", s.seed,
                 "solved" if s.success else f"failed ({s.reason})", s.rounds, s.online_samples)
    if not args.no_report:
        render_report(out, cfg.algorithm)
    return outcome.exit_code


def _cmd_report(args) -> int:
    for path in render_report(args.run_dir, args.title):
        print(path)
    return 0


def _cmd_dataset(args) -> int:
    cfg = ComblockConfig(horizon=args.horizon, seed=args.seed)
    ds = generate_offline_dataset(cfg, args.epsilon, args.n, np.random.default_rng(args.seed))
    ds.save(args.out)
    print(json.dumps({"path": args.out, "size": ds.size, "epsilon": ds.epsilon,
                      "fraction_optimal": fraction_optimal(ds)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridrl")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="run only this seed")
    run.add_argument("--out", default=None, help=f"output directory (else ${ENV_OUT_DIR})")
    run.add_argument("--no-report", action="store_true", help="skip figure rendering")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="render CSV and figures for a run directory")
    rep.add_argument("run_dir")
    rep.add_argument("--title", default=None)
    rep.set_defaults(func=_cmd_report)

    ds = sub.add_parser("dataset", help="generate a comblock offline dataset (JSONL)")
    ds.add_argument("--horizon", type=int, default=5)
    ds.add_argument("--epsilon", type=float, default=None)
    ds.add_argument("-n", type=int, default=50_000)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--out", required=True)
    ds.set_defaults(func=_cmd_dataset)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
