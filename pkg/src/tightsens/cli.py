"""Command-line front end.

Exit codes: 0 on success, 2 on input errors, 3 on numerical failures.
All randomness derives from the root ``--seed`` flag.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .core import DegenerateInputError, NumericalError, WeightedPointSet
from .coreset import StreamTree, compute_sensitivities, sample_coreset
from .evaluation import (
    METHOD_NAMES,
    check_lift_inequalities,
    oracle_affine_sensitivity,
    oracle_nonaffine_sensitivity,
    run_experiment,
)
from .io import DatasetSpec, InputError, load_dataset
from .sensitivity import AFFINE_EPS_MAX, SensitivityVector, leverage_sensitivities

log = logging.getLogger("tightsens")

EXIT_INPUT = 2
EXIT_NUMERICAL = 3
SENS_METHODS = ("tight", "uniform", "baseline", "leverage")
SUBSAMPLE_KEY = 7  # spawn key reserved for row subsampling


def _derived_seed(root: int, key: int) -> int:
    return int(np.random.SeedSequence(root, spawn_key=(key,)).generate_state(1, dtype=np.uint32)[0])


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _check_affine_eps(args) -> None:
    if getattr(args, "affine", False) and not 0 < args.eps <= AFFINE_EPS_MAX:
        raise InputError(
            f"--eps {args.eps:g} is outside the affine range (0, 1/12]; "
            "use e.g. --eps 0.01 (values in [1e-3, 1/12] are well conditioned)"
        )


def _dataset(args) -> WeightedPointSet:
    normalize = args.normalize if args.normalize is not None else bool(getattr(args, "affine", False))
    spec = DatasetSpec(
        path=Path(args.data),
        format=args.format,
        weight_column=args.weight_column,
        subsample=args.subsample,
        subsample_seed=_derived_seed(args.seed, SUBSAMPLE_KEY),
        normalize=normalize,
    )
    return load_dataset(spec)


def _sens_to_json(sens: SensitivityVector, d: int) -> dict:
    return {
        "n": sens.n,
        "d": d,
        "k": sens.k,
        "affine": sens.affine,
        "eps": sens.eps,
        "method": sens.method,
        "total": sens.total,
        "values": sens.values.tolist(),
    }


def _sens_from_json(obj) -> SensitivityVector:
    try:
        return SensitivityVector(
            np.array(obj["values"], dtype=float), float(obj["total"]), obj["method"],
            float(obj["eps"]), int(obj["k"]), bool(obj["affine"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed sensitivity file ({exc})") from None


def cmd_sens(args) -> int:
    _check_affine_eps(args)
    pset = _dataset(args)
    if args.method == "leverage":
        sens = leverage_sensitivities(pset)
    else:
        sens = compute_sensitivities(pset, args.method, args.k, args.affine, args.eps, args.parallelism)
    _write_json(args.out, _sens_to_json(sens, pset.d))
    return 0


def cmd_coreset(args) -> int:
    pset = _dataset(args)
    try:
        obj = json.loads(Path(args.sens).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{args.sens}: {exc}") from None
    sens = _sens_from_json(obj)
    if sens.n != pset.n:
        raise InputError(f"sensitivity file covers {sens.n} rows but the dataset has {pset.n}")
    cs = sample_coreset(pset, sens, args.m, args.seed)
    cs.save(args.out)
    return 0


def cmd_experiment(args) -> int:
    _check_affine_eps(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHOD_NAMES]
    if bad:
        raise InputError(f"unknown method(s) {', '.join(bad)}; valid methods: {', '.join(METHOD_NAMES)}")
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"--sizes must be a comma-separated list of integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise InputError("--sizes needs at least one positive size")
    pset = _dataset(args)
    report = run_experiment(
        pset, args.k, args.affine, methods, sizes, args.trials,
        root_seed=args.seed, eps=args.eps, dataset=Path(args.data).name, parallelism=args.parallelism,
    )
    out = Path(args.out)
    timings = not args.no_timings
    report.write_csv(out.with_suffix(".csv"), timings=timings)
    report.write_json(out.with_suffix(".json"), timings=timings)
    return 0


def cmd_stream(args) -> int:
    _check_affine_eps(args)
    if args.chunk_size < 1:
        raise InputError("--chunk-size must be positive")
    pset = _dataset(args)
    tree = StreamTree(
        reduce_size=args.reduce_size, leaf_size=args.leaf_size, k=args.k, affine=args.affine,
        eps=args.eps, method=args.method, seed=args.seed, parallelism=args.parallelism,
    )
    for start in range(0, pset.n, args.chunk_size):
        stop = start + args.chunk_size
        tree.push(pset.points[start:stop], pset.weights[start:stop])
    cs = tree.finalize(args.m_final)
    cs.save(args.out)
    return 0


def cmd_oracle(args) -> int:
    if args.lift_check:
        pset = _dataset(args)
        rep = check_lift_inequalities(pset, args.eps, args.z, args.trials, seed=args.seed)
        _write_json(args.out, {
            "trials": rep.trials, "z": rep.z, "eps": rep.eps, "passed": rep.passed,
            "checks": rep.checks, "violations": rep.violations, "worst": rep.worst,
        })
        return 0 if rep.passed else 1
    pset = _dataset(args)
    if not 0 <= args.index < pset.n:
        raise InputError(f"--index {args.index} out of range for {pset.n} rows")
    if args.affine:
        value, _ = oracle_affine_sensitivity(pset, args.index, args.k, seed=args.seed)
    else:
        value, _ = oracle_nonaffine_sensitivity(pset, args.index, args.k, seed=args.seed)
    _write_json(args.out, {"index": args.index, "k": args.k, "affine": args.affine, "value": value})
    return 0


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV or MatrixMarket file")
    # also accepted after the subcommand; overrides the root flag
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root random seed")
    p.add_argument("--format", choices=("auto", "csv", "matrix-market"), default="auto")
    p.add_argument("--weight-column", default=None, help="CSV column (index or header name) holding weights")
    p.add_argument("--subsample", type=int, default=None, help="keep this many rows, chosen from the root seed")
    norm = p.add_mutually_exclusive_group()
    norm.add_argument("--normalize", dest="normalize", action="store_true", default=None,
                      help="scale rows so the largest norm is 1 (default on with --affine)")
    norm.add_argument("--no-normalize", dest="normalize", action="store_false")


def _add_query_args(p: argparse.ArgumentParser, eps_default: float = 1e-3) -> None:
    p.add_argument("--k", type=int, required=True, help="subspace dimension")
    p.add_argument("--affine", action="store_true", help="affine k-subspaces (k-PCA) instead of linear ones")
    p.add_argument("--eps", type=float, default=eps_default, help="additive error of the tight sensitivities")
    p.add_argument("--parallelism", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tightsens",
        description="Tight sensitivities and coresets for k-SVD and k-PCA.",
        epilog="All randomness (subsampling, coreset draws, per-trial seeds) is derived from --seed.",
    )
    parser.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sens", help="compute per-row sensitivities (JSON)")
    _add_data_args(p)
    _add_query_args(p)
    p.add_argument("--method", choices=SENS_METHODS, default="tight")
    p.add_argument("--out", default="-", help="output JSON path ('-' for stdout)")
    p.set_defaults(func=cmd_sens)

    p = sub.add_parser("coreset", help="sample a coreset from a sensitivity file")
    _add_data_args(p)
    p.add_argument("--sens", required=True, help="sensitivity JSON from the sens command")
    p.add_argument("--m", type=int, required=True, help="coreset size")
    p.add_argument("--out", required=True, help="output CSV; provenance goes to <out>.json")
    p.set_defaults(func=cmd_coreset)

    p = sub.add_parser("experiment", help="compare coreset methods by relative regret")
    _add_data_args(p)
    _add_query_args(p)
    p.add_argument("--sizes", required=True, help="comma-separated coreset sizes")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--methods", default=",".join(METHOD_NAMES),
                   help=f"comma-separated subset of {', '.join(METHOD_NAMES)}")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.json")
    p.add_argument("--no-timings", action="store_true", help="omit wall-clock columns for byte-stable output")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("stream", help="build a coreset by merge-and-reduce over row chunks")
    _add_data_args(p)
    _add_query_args(p)
    p.add_argument("--method", choices=("tight", "uniform", "baseline"), default="tight")
    p.add_argument("--chunk-size", type=int, default=1000)
    p.add_argument("--leaf-size", type=int, default=4096)
    p.add_argument("--reduce-size", type=int, required=True)
    p.add_argument("--m-final", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("oracle", help="brute-force sensitivity oracle or the lift inequality checker")
    _add_data_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--affine", action="store_true")
    p.add_argument("--lift-check", action="store_true", help="run the lift inequality checker instead")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--z", type=float, default=2.0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (InputError, DegenerateInputError, ValueError, OSError, IndexError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
