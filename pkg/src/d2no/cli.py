"""Command line entry point: ``d2no gen-data | train | eval | compare``.

``--spec`` takes a built-in experiment name or a path to a JSON spec. Errors
are reported as one JSON object on stderr and a non-zero exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex


def _spec(arg: str, replications=None, seed=None) -> ex.ExperimentSpec:
    spec = ex.builtin_spec(arg) if arg in ex.EXPERIMENTS else ex.load_spec(arg)
    changes = {}
    if replications is not None:
        changes["replications"] = replications
    if seed is not None:
        changes["master_seed"] = seed
    return spec.replace(**changes) if changes else spec


def cmd_gen_data(args) -> int:
    spec = _spec(args.spec, seed=args.seed)
    out = Path(args.out)
    ex.generate_data(spec, out)
    ex.save_spec(out / "spec.json", spec)
    print(f"wrote {len(spec.clients)} client datasets to {out}")
    return 0


def cmd_train(args) -> int:
    spec = _spec(args.spec, args.replications, args.seed)
    bundle = ex.load_data(spec, args.data)
    methods = args.methods.split(",") if args.methods else None
    if methods:
        unknown = set(methods) - set(spec.methods)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; spec has {spec.methods}")
    paths = ex.train_all(spec, bundle, args.out, methods, mode=args.mode)
    print(f"trained {len(paths)} runs into {args.out}")
    return 0


def cmd_eval(args) -> int:
    runs = Path(args.runs)
    spec = _spec(args.spec) if args.spec else ex.load_spec(runs / "spec.json")
    bundle = ex.load_data(spec, args.data)
    out = Path(args.out) if args.out else runs
    reports = ex.evaluate_runs(spec, bundle, runs, args.split, out)
    for r in reports:
        print(f"{r.method}: mean error {r.mean():.4g} +/- {r.std():.2g} over {r.replications} runs")
    return 0


def cmd_compare(args) -> int:
    reports = [ex.read_report(p) for p in args.reports]
    print(ex.compare_reports(reports, args.out), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2no", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample inputs and solve for labels")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override the spec's master seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train D2NO and baselines over replications")
    t.add_argument("--spec", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--replications", type=int)
    t.add_argument("--seed", type=int, help="override the spec's master seed")
    t.add_argument("--mode", choices=["lockstep", "periodic"])
    t.add_argument("--methods", help="comma separated subset, e.g. d2no,deeponet-m10")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained runs on held-out data")
    e.add_argument("--runs", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--spec", help="defaults to the spec saved with the runs")
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.add_argument("--out", help="report directory, defaults to --runs")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="tabulate reports of one experiment")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def _limit_threads() -> None:
    n = os.environ.get("D2NO_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None) -> int:
    _limit_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        if args.verbose:
            raise
        return 2 if isinstance(exc, ex.HashMismatch) else 1


if __name__ == "__main__":
    sys.exit(main())
