"""Command line front end: generate datasets, run configs, reproduce bundles."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .core_math import RngStream
from .harness import (
    apply_overrides,
    bundled_config,
    parse_config,
    run_alpha_sweep,
    run_experiment,
)
from .problems import gen_sparse_regression, gen_underparam_regression, save_dataset

_BUNDLES = {
    "bias-order": "bias_order",
    "limit-distance": "limit_distance",
    "alpha-sweep": "alpha_sweep",
    "ou": "ou_stationary",
    "coupling": "coupling_bound",
}


def _add_overrides(sp) -> None:
    sp.add_argument("--seed", type=int, default=None,
                    help="replace the base run seed")
    sp.add_argument("--sigma", type=float, default=None,
                    help="collapse the noise grid to this single scale")
    sp.add_argument("--alpha", type=float, default=None,
                    help="replace the initialization scale")
    sp.add_argument("--steps", type=int, default=None,
                    help="replace the step budget")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="noiselab",
        description="Simulate noisy optimizers on regression instances and "
                    "grade the runs against their closed-form limits.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--kind", choices=("sparse", "tall"), default="sparse",
                   help="sparse: wide matrix with a planted sparse vector; "
                        "tall: skinny matrix with noisy labels")
    g.add_argument("--n", type=int, default=40)
    g.add_argument("--d", type=int, default=100)
    g.add_argument("--s", type=int, default=5, help="planted support size")
    g.add_argument("--label-noise", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run an experiment described by a config file")
    r.add_argument("config")
    _add_overrides(r)

    rp = sub.add_parser("reproduce", help="run one of the bundled studies")
    rp.add_argument("name", choices=sorted(_BUNDLES))
    rp.add_argument("--out", default="", help="output directory")
    _add_overrides(rp)

    a = sub.add_parser("analyze", help="report the checks of a stored summary")
    a.add_argument("record", help="summary.json path or its directory")

    return p


def _report(rec) -> None:
    print(f"experiment: {rec.config.experiment}  out: {rec.config.outdir()}")
    for name in sorted(rec.checks):
        mark = "ok  " if rec.checks[name] else "FAIL"
        print(f"  [{mark}] {name}")
    scalars = {k: rec.scalars[k] for k in sorted(rec.scalars)}
    print(json.dumps(scalars, indent=2, sort_keys=True))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "generate":
        rng = RngStream(args.seed)
        if args.kind == "sparse":
            ds = gen_sparse_regression(args.n, args.d, args.s, rng)
        else:
            ds = gen_underparam_regression(args.n, args.d, args.label_noise, rng)
        save_dataset(ds, args.out)
        print(f"wrote {args.kind} instance n={ds.n} d={ds.d} to {args.out}")
        return 0

    if args.command == "run":
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
        cfg = apply_overrides(cfg, seed=args.seed, sigma=args.sigma,
                              alpha=args.alpha, steps=args.steps)
        rec = run_experiment(cfg)
        _report(rec)
        return 0 if rec.passed() else 1

    if args.command == "reproduce":
        if args.name == "alpha-sweep":
            recs = run_alpha_sweep(out=args.out, seed=args.seed, sigma=args.sigma,
                                   alpha=args.alpha, steps=args.steps)
        else:
            cfg = bundled_config(_BUNDLES[args.name], out=args.out)
            cfg = apply_overrides(cfg, seed=args.seed, sigma=args.sigma,
                                  alpha=args.alpha, steps=args.steps)
            recs = [run_experiment(cfg)]
        for rec in recs:
            _report(rec)
        return 0 if all(r.passed() for r in recs) else 1

    path = args.record
    if os.path.isdir(path):
        path = os.path.join(path, "summary.json")
    with open(path) as fh:
        summary = json.load(fh)
    for name in sorted(summary["checks"]):
        mark = "ok  " if summary["checks"][name] else "FAIL"
        print(f"  [{mark}] {name}")
    print(json.dumps(summary["scalars"], indent=2, sort_keys=True))
    return 0 if summary["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
