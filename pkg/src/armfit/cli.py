"""Batch command line front end: randomize, analyze, test, simulate.

Exit codes are a stable contract: 0 success, 1 input validation,
2 numerical failure, 3 balance-criterion exhaustion.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as afio
from .design import BalanceFilter, TreatmentStructure, complete_randomize, rerandomize
from .errors import BalanceExhaustedError, NumericalError, ValidationError
from .estimators import ExperimentData, estimate, wald_restriction_test
from .factorial import (
    EffectSet,
    canonical_subsets,
    factor_regress,
    normalize_coding,
    parse_subset_label,
)
from .harness import StudyError, export_results, run_fractional_study, run_section6_study


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="armfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_rand = sub.add_parser("randomize", help="draw a treatment assignment")
    p_rand.add_argument("--n", type=int, default=None, help="unit count (checked against --sizes)")
    p_rand.add_argument("--sizes", required=True, help="comma-separated group sizes")
    p_rand.add_argument("--seed", type=int, default=0)
    p_rand.add_argument("--rem-covariates", default=None, help="CSV of covariates x1..xJ")
    p_rand.add_argument("--rem-contrasts", default=None, help="headerless CSV of contrast rows")
    p_rand.add_argument("--rem-threshold", default=None, help="acceptance threshold (or 'inf')")
    p_rand.add_argument("--max-tries", type=int, default=10_000)
    p_rand.add_argument("--out", default=None)

    p_an = sub.add_parser("analyze", help="estimate treatment effects from a data file")
    p_an.add_argument("--data", required=True)
    p_an.add_argument("--spec", default="L", help="N, F, or L")
    p_an.add_argument("--restriction", default="none", help="none|zero|equal|file=PATH")
    p_an.add_argument(
        "--contrast",
        default=None,
        help="file=PATH | factorial:saturated | factorial:SUBSETS (e.g. factorial:A,B)",
    )
    p_an.add_argument("--coding", default="pm1", help="pm1 or 01")
    p_an.add_argument("--arms", type=int, default=None, help="declared number of arms")
    p_an.add_argument("--out", default=None)
    p_an.add_argument("--format", default="csv", choices=("csv", "json"))

    p_test = sub.add_parser("test", help="Wald test of a linear restriction")
    p_test.add_argument("--data", required=True)
    p_test.add_argument("--restriction", required=True, help="zero|equal|file=PATH")
    p_test.add_argument("--arms", type=int, default=None)
    p_test.add_argument("--out", default=None)
    p_test.add_argument("--format", default="json", choices=("json", "csv"))

    p_sim = sub.add_parser("simulate", help="run a built-in replication study")
    p_sim.add_argument("--config", default=None, help="key=value file: dgp, reps, seed, out")
    p_sim.add_argument("--dgp", default=None,
                       help="section6:hetero|section6:equal|fractional:I|fractional:II")
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", default=None)
    return parser


def _write_lines(lines: list[str], out: str | None) -> None:
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="\n") as f:
            f.write(text)


def _cmd_randomize(args) -> int:
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise ValidationError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    structure = TreatmentStructure(sizes)
    if args.n is not None and args.n != structure.n_units:
        raise ValidationError(f"--n {args.n} does not match the sum of --sizes {structure.n_units}")
    rem_flags = (args.rem_covariates, args.rem_contrasts, args.rem_threshold)
    if any(f is not None for f in rem_flags):
        if args.rem_covariates is None or args.rem_contrasts is None or args.rem_threshold is None:
            raise ValidationError(
                "--rem-covariates, --rem-contrasts, and --rem-threshold go together"
            )
        X = afio.read_numeric_csv(args.rem_covariates, "covariate")
        G = afio.read_numeric_csv(args.rem_contrasts, "contrast")
        try:
            threshold = float(args.rem_threshold)
        except ValueError:
            raise ValidationError(f"--rem-threshold must be a number or 'inf', got {args.rem_threshold!r}")
        balance = BalanceFilter(G, threshold)
        assignment, _ = rerandomize(structure, X, balance, args.seed, args.max_tries)
    else:
        assignment = complete_randomize(structure, args.seed)
    if args.out is None:
        lines = ["z"] + [str(int(v)) for v in assignment.z]
        _write_lines(lines, None)
    else:
        afio.write_assignment_csv(assignment, structure, args.out)
    return 0


def _parse_restriction(arg: str, data: ExperimentData):
    from .estimators import restriction_equal_correlation, restriction_zero_correlation

    q, j = data.n_arms, data.n_covariates
    if arg == "none":
        return None
    if arg == "zero":
        return restriction_zero_correlation(q, j)
    if arg == "equal":
        return restriction_equal_correlation(q, j)
    if arg.startswith("file="):
        from .lsq import Restriction

        R, r = afio.read_restriction_file(arg[len("file="):], q + j * q)
        return Restriction(R, r)
    raise ValidationError(f"unknown --restriction {arg!r}; expected none, zero, equal, or file=PATH")


def _declared_arms(args) -> int | None:
    if args.arms is not None:
        if args.arms < 1:
            raise ValidationError(f"--arms must be positive, got {args.arms}")
        return args.arms
    contrast = getattr(args, "contrast", None)
    if contrast and contrast.startswith("file="):
        mat = afio.read_numeric_csv(contrast[len("file="):], "contrast")
        return mat.shape[1]
    return None


def _cmd_analyze(args) -> int:
    data = afio.read_data_file(args.data, n_arms=_declared_arms(args))
    spec_kind = args.spec
    factor_spec = data.structure.factor_spec
    contrast_arg = args.contrast
    if contrast_arg is None:
        contrast_arg = "factorial:saturated" if factor_spec is not None else "default"

    if contrast_arg.startswith("factorial:"):
        if factor_spec is None:
            raise ValidationError("factorial contrasts need factor columns f1..fK in the data file")
        if args.restriction != "none":
            raise ValidationError(
                "--restriction cannot be combined with factorial contrasts; "
                "the adjustment is chosen by --spec"
            )
        what = contrast_arg[len("factorial:"):]
        k = factor_spec.n_factors
        if what == "saturated":
            interest = canonical_subsets(k)
        else:
            interest = tuple(parse_subset_label(lbl, k) for lbl in what.split(","))
        adjustment = {"N": "none", "F": "additive", "L": "interacted"}[
            _normalize_spec(spec_kind)
        ]
        if data.n_covariates == 0:
            adjustment = "none"
        effects = EffectSet.unsaturated(k, interest, adjustment)
        result = factor_regress(data, effects, normalize_coding(args.coding))
        if args.format == "json":
            _write_lines([afio.dump_json(afio.factorial_result_json(result))], args.out)
        else:
            _write_lines(afio.factorial_result_csv_lines(result), args.out)
        return 0

    restriction = _parse_restriction(args.restriction, data)
    if contrast_arg == "default":
        contrast = None
    elif contrast_arg.startswith("file="):
        contrast = afio.read_contrast_file(contrast_arg[len("file="):], data.n_arms)
    else:
        raise ValidationError(
            f"unknown --contrast {contrast_arg!r}; expected file=PATH or factorial:..."
        )
    result = estimate(data, _normalize_spec(spec_kind), restriction, contrast)
    if args.format == "json":
        _write_lines([afio.dump_json(afio.estimation_result_json(result))], args.out)
    else:
        _write_lines(afio.estimation_result_csv_lines(result), args.out)
    return 0


def _normalize_spec(spec: str) -> str:
    from .estimators import normalize_kind

    return normalize_kind(spec)


def _cmd_test(args) -> int:
    data = afio.read_data_file(args.data, n_arms=args.arms)
    if args.restriction == "none":
        raise ValidationError("the test command needs a non-empty --restriction")
    restriction = _parse_restriction(args.restriction, data)
    result = wald_restriction_test(data, restriction.matrix, restriction.rhs)
    payload = {"W": result.statistic, "df": result.df, "p_value": result.p_value}
    if args.format == "json":
        _write_lines([afio.dump_json(payload)], args.out)
    else:
        _write_lines(
            ["W,df,p_value", f"{result.statistic!r},{result.df},{result.p_value!r}"], args.out
        )
    return 0


_DGPS = ("section6:hetero", "section6:equal", "fractional:I", "fractional:II")


def _specs_from_config(spec_text: str):
    from .harness import TreatmentSpec

    specs = []
    for item in spec_text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, restriction = item.partition(":")
        kind = _normalize_spec(name)
        if restriction and restriction not in ("zero", "equal"):
            raise ValidationError(
                f"unknown restriction {restriction!r} in spec {item!r}; expected zero or equal"
            )
        specs.append(
            TreatmentSpec(item, "L" if restriction else kind, restriction or None)
        )
    if not specs:
        raise ValidationError("the 'specs' entry names no estimator specs")
    return tuple(specs)


def _table_study(config: dict, reps: int, seed: int):
    from .harness import StudyConfig, run_study

    sizes_text = config.get("sizes")
    if sizes_text is None:
        raise ValidationError("a 'table=' study needs a 'sizes=' line with group sizes")
    sizes = tuple(int(s) for s in sizes_text.split(","))
    table = afio.read_potential_table_csv(config["table"], TreatmentStructure(sizes))
    specs = _specs_from_config(config.get("specs", "N,F,L"))
    return run_study(StudyConfig(table=table, specs=specs, replications=reps, seed=seed))


def _cmd_simulate(args) -> int:
    config = afio.read_config_file(args.config) if args.config else {}
    dgp = args.dgp if args.dgp is not None else config.get("dgp")
    reps = args.reps if args.reps is not None else int(config.get("reps", 5000))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    out = args.out if args.out is not None else config.get("out", "armfit-study")
    if reps < 1:
        raise ValidationError(f"--reps must be at least 1, got {reps}")
    if dgp is None and "table" in config:
        summary = _table_study(config, reps, seed)
    elif dgp == "section6:hetero":
        summary = run_section6_study("heterogeneous", reps, seed)
    elif dgp == "section6:equal":
        summary = run_section6_study("equal", reps, seed)
    elif dgp == "fractional:I":
        summary = run_fractional_study("I", reps, seed)
    elif dgp == "fractional:II":
        summary = run_fractional_study("II", reps, seed)
    elif dgp is None:
        raise ValidationError(
            f"either --dgp (one of {_DGPS}) or a config 'table=' line is required"
        )
    else:
        raise ValidationError(f"unknown --dgp {dgp!r}; expected one of {_DGPS}")
    summary_path, raw_path = export_results(summary, out)
    sys.stdout.write(f"{summary_path}\n{raw_path}\n")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "randomize":
            return _cmd_randomize(args)
        if args.command == "analyze":
            return _cmd_analyze(args)
        if args.command == "test":
            return _cmd_test(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BalanceExhaustedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StudyError as exc:
        cause = exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, BalanceExhaustedError):
            return 3
        if isinstance(cause, ValidationError):
            return 1
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
