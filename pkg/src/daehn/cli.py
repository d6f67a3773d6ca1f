"""Command-line interface.

  daehn run --config <path> [--model mlp|pinn|daehn] [--problem <name>]
            [--seed N] [--out-dir <dir>]      train and emit artifacts
  daehn validate --config <path>              parse and check a config
  daehn list-problems                         registered problem names
  daehn sweep --configs a.cfg b.cfg ...       independent runs, optionally
            [--parallel N]                    in parallel processes

Exit codes: 0 success, 1 configuration error, 2 training divergence, 3 I/O.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, parse_config
from .problems import build_problem, problem_names
from .run import DivergenceError, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


def _run_one(args) -> int:
    path, overrides = args
    try:
        config = parse_config(path, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        payload = run_experiment(config)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    val = payload["best"]["val"]
    msg = (
        f"{payload['model']} on {payload['problem']}: "
        f"val mse={val['mse_data']:.3e}"
    )
    if val["abs_violation"] is not None:
        msg += f" violation={val['abs_violation']:.3e}"
    if val.get("nonconverged_fraction"):
        msg += f" nonconverged={val['nonconverged_fraction']:.1%}"
    print(msg)
    print(f"artifacts in {config.out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="daehn",
        description="hard differential-algebraic constraints via a "
        "differentiable projection layer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one model and emit artifacts")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--model", choices=("mlp", "pinn", "daehn"))
    p_run.add_argument("--problem")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out-dir")

    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("--config", required=True)

    sub.add_parser("list-problems", help="print registered problems")

    p_sweep = sub.add_parser("sweep", help="run several configs")
    p_sweep.add_argument("--configs", nargs="+", required=True)
    p_sweep.add_argument("--parallel", type=int, default=1)

    args = parser.parse_args(argv)

    if args.command == "list-problems":
        for name in problem_names():
            spec = build_problem(name)
            axes = ", ".join(a.name for a in spec.axes)
            print(f"{name}: {spec.n_y} output(s) over ({axes})")
        return EXIT_OK

    if args.command == "validate":
        try:
            config = parse_config(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"ok: {config.train.model} on {config.train.problem}")
        return EXIT_OK

    if args.command == "run":
        overrides = {
            "model": args.model,
            "problem": args.problem,
            "seed": args.seed,
            "out_dir": args.out_dir,
        }
        return _run_one((args.config, overrides))

    if args.command == "sweep":
        jobs = [(path, {}) for path in args.configs]
        if args.parallel > 1:
            import multiprocessing as mp

            with mp.Pool(args.parallel) as pool:
                codes = pool.map(_run_one, jobs)
        else:
            codes = [_run_one(j) for j in jobs]
        return max(codes)

    return EXIT_CONFIG  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
