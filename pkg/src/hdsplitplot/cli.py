"""Command-line front end.

Subcommands: ``test`` (analyse a dataset), ``simulate`` (run a Monte Carlo
study), ``oracle`` (exact quantities for a declared design), ``gen`` (write
a synthetic dataset), ``overlap`` (subsample-overlap check) and ``report``
(render figures from a study CSV).  Exit codes: 0 success, 1 usage error,
2 data error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    AnalysisConfig,
    DataFormatError,
    analysis_config_from,
    read_config,
    read_matrix_csv,
    read_sample_csv,
    write_sample_csv,
)
from .engine import TestResult, factorial_battery, run_test
from .estimators import InsufficientSampleError
from .model import NotPositiveDefiniteError, SplitPlotDesign, sample as draw_sample
from .oracle import oracle_report
from .projections import ProjectionPair, projector_from_hypothesis, standard_hypothesis
from .simulate import (
    SimConfig,
    parse_covariance,
    preset,
    run_study,
    subsample_overlap_study,
)

_DATA_ERRORS = (
    DataFormatError,
    NotPositiveDefiniteError,
    InsufficientSampleError,
    FileNotFoundError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _parse_structure(text: str) -> tuple[int, int]:
    try:
        q, _, s = text.lower().partition("x")
        return int(q), int(s)
    except ValueError as exc:
        raise UsageError(f"sub-plot structure must look like '4x6', got {text!r}") from exc


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _hypothesis_pair(args, a: int, d: int) -> ProjectionPair:
    structure = _parse_structure(args.subplot) if getattr(args, "subplot", "") else None
    if getattr(args, "tw", "") or getattr(args, "ts", ""):
        if not (args.tw and args.ts):
            raise UsageError("raw hypothesis input needs both --tw and --ts")
        return ProjectionPair(
            projector_from_hypothesis(read_matrix_csv(args.tw)),
            projector_from_hypothesis(read_matrix_csv(args.ts)),
        )
    return standard_hypothesis(args.hypothesis, a=a, d=d, structure=structure)


def _means_matrix(spec: str, a: int, d: int) -> np.ndarray:
    means = np.zeros((a, d))
    if spec in ("", "zero"):
        return means
    kind, _, arg = spec.partition(":")
    if kind == "csv":
        m = read_matrix_csv(arg)
        if m.shape != (a, d):
            raise DataFormatError(f"means in {arg} have shape {m.shape}, expected ({a}, {d})")
        return m
    from .simulate import _mean_for

    if kind in ("shift", "trend", "onepoint", "one_point"):
        alternative = "one_point" if kind in ("onepoint", "one_point") else kind
        means[0] = _mean_for(alternative, float(arg), d)
        return means
    raise UsageError(f"unknown means spec {spec!r}")


def _build_design(args, d: int) -> SplitPlotDesign:
    n = _parse_int_list(args.n)
    cov_specs = args.cov.split(",")
    if len(cov_specs) != len(n):
        raise UsageError("need one covariance spec per group")
    covs = np.stack([parse_covariance(cs, d) for cs in cov_specs])
    means = _means_matrix(getattr(args, "means", "zero"), len(n), d)
    return SplitPlotDesign(means=means, covariances=covs, n=n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_test(args) -> int:
    cfg = AnalysisConfig()
    if args.config:
        cfg = analysis_config_from(read_config(args.config))
    for key in ("data", "hypothesis", "subplot", "tw", "ts", "mode", "out"):
        value = getattr(args, key, None)
        if value:
            setattr(cfg, key, value)
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.b is not None:
        cfg.b_draws = args.b
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_correction:
        cfg.correction = False
    if args.dof:
        cfg.dof_estimator = args.dof
    if not cfg.data:
        raise UsageError("test needs --data (or a config file with a data key)")

    s = read_sample_csv(cfg.data)
    if cfg.hypothesis == "battery":
        if not cfg.subplot:
            raise UsageError("battery needs --subplot, e.g. --subplot 4x6")
        results = factorial_battery(
            s,
            _parse_structure(cfg.subplot),
            alpha=cfg.alpha,
            b_draws=cfg.b_draws,
            seed=cfg.seed,
            correction=cfg.correction,
            mode=cfg.mode,
        )
        lines = ["hypothesis," + ",".join(TestResult.CSV_FIELDS)]
        for kind, res in results:
            flat = res.flat()
            lines.append(kind + "," + ",".join(str(flat[k]) for k in TestResult.CSV_FIELDS))
        body = f"# hdsplitplot={__version__}\n" + "\n".join(lines) + "\n"
        if cfg.out:
            Path(cfg.out).write_text(body)
        print(body, end="")
        return 0

    class _Args:
        hypothesis = cfg.hypothesis
        subplot = cfg.subplot
        tw = cfg.tw
        ts = cfg.ts

    pair = _hypothesis_pair(_Args, a=s.a, d=s.d)
    result = run_test(
        s,
        pair,
        alpha=cfg.alpha,
        b_draws=cfg.b_draws,
        seed=cfg.seed,
        correction=cfg.correction,
        mode=cfg.mode,
        dof_estimator=cfg.dof_estimator,
    )
    payload = result.to_json() if args.format == "json" else result.to_csv()
    if cfg.out:
        Path(cfg.out).write_text(payload)
    print(payload, end="" if payload.endswith("\n") else "\n")
    return 0


def _sim_config_from_mapping(mapping: dict[str, str]) -> SimConfig:
    cfg = SimConfig()
    casts = {
        "hypothesis": str,
        "alternative": str,
        "alpha": float,
        "n_sim": int,
        "b_multiplier": float,
        "seed": int,
        "n": _parse_int_list,
        "d_grid": _parse_int_list,
        "deltas": _parse_float_list,
        "cov": lambda v: tuple(v.split(",")),
        "tests": lambda v: tuple(v.split(",")),
    }
    fields = {
        "deltas": "delta_grid",
        "cov": "cov_specs",
    }
    out = {}
    for key, value in mapping.items():
        if key == "out":
            out["__out__"] = value
            continue
        if key not in casts:
            raise DataFormatError(f"unknown study config key {key!r}")
        out[fields.get(key, key)] = casts[key](value)
    cfg = replace(cfg, **{k: v for k, v in out.items() if k != "__out__"})
    if "__out__" in out:
        cfg.__dict__["_out"] = out["__out__"]
    return cfg


def _cmd_simulate(args) -> int:
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        cfg = _sim_config_from_mapping(read_config(args.config))
    else:
        raise UsageError("simulate needs --preset or --config")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_sim is not None:
        overrides["n_sim"] = args.n_sim
    if args.d_grid:
        overrides["d_grid"] = _parse_int_list(args.d_grid)
    if args.deltas:
        overrides["delta_grid"] = _parse_float_list(args.deltas)
    if overrides:
        cfg = replace(cfg, **overrides)
    out_path = args.out or cfg.__dict__.get("_out") or "study.csv"
    result = run_study(cfg, out_path)
    for row in result.rows:
        print(
            f"{row.hypothesis} d={row.d} delta={row.delta} {row.test}: "
            f"rate={row.rate:.4f} (se={row.se:.4f}, n_sim={row.n_sim})"
        )
    print(f"study rows appended to {out_path}")
    if args.plot:
        from .plots import study_report

        for path in study_report(out_path):
            print(f"figure written to {path}")
    return 0


def _cmd_oracle(args) -> int:
    structure = _parse_structure(args.subplot) if args.subplot else None
    d = args.d if args.d else (structure[0] * structure[1] if structure else None)
    if d is None:
        raise UsageError("oracle needs --d or --subplot")
    n = _parse_int_list(args.n)
    design = _build_design(args, d)
    pair = standard_hypothesis(args.hypothesis, a=len(n), d=d, structure=structure)
    quantities = (
        ("tau_p", "tau_cq", "moments", "traces", "levels", "spectrum")
        if args.quantity == "all"
        else tuple(args.quantity.split(","))
    )
    rows = oracle_report(pair, design, quantities, alpha=args.alpha)
    lines = ["quantity,value,method"] + [f"{q},{float(v)!r},{m}" for q, v, m in rows]
    body = f"# hdsplitplot={__version__} seed=none\n" + "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(body)
    print(body, end="")
    return 0


def _cmd_gen(args) -> int:
    d = args.d if args.d else (
        _parse_structure(args.subplot)[0] * _parse_structure(args.subplot)[1]
        if args.subplot
        else None
    )
    if d is None:
        raise UsageError("gen needs --d or --subplot")
    design = _build_design(args, d)
    s = draw_sample(design, args.seed)
    write_sample_csv(s, args.out, seed=args.seed)
    print(f"wrote {s.total} subjects x {s.d} measurements to {args.out}")
    return 0


def _cmd_overlap(args) -> int:
    report = subsample_overlap_study(
        n=_parse_int_list(args.n),
        m=args.m,
        b_draws=args.b_draws,
        reps=args.reps,
        seed=args.seed,
    )
    print(
        f"empirical={report.empirical:.6f} expected={report.expected:.6f} "
        f"se={report.se:.6f} reps={report.reps} "
        f"within_3se={report.within_3se}"
    )
    return 0 if report.within_3se else 2


def _cmd_report(args) -> int:
    from .plots import study_report

    for path in study_report(args.study, args.out_dir):
        print(f"figure written to {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdsplitplot", description=__doc__)
    parser.add_argument("--version", action="version", version=f"hdsplitplot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="analyse one dataset")
    p.add_argument("--data", default="")
    p.add_argument("--config", default="")
    p.add_argument("--hypothesis", default="",
                   help="group|time|interaction|time_within:L|between:L,K|battery")
    p.add_argument("--subplot", default="", help="crossed sub-plot structure, e.g. 4x6")
    p.add_argument("--tw", default="", help="raw whole-plot contrast matrix CSV")
    p.add_argument("--ts", default="", help="raw sub-plot contrast matrix CSV")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--b", type=int, default=None, help="subsample draws (default 50000*N)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", default="", choices=["", "efficient", "exact", "subsampled"])
    p.add_argument("--dof", default="", choices=["", "c5", "c7"])
    p.add_argument("--no-correction", action="store_true")
    p.add_argument("--format", default="csv", choices=["csv", "json"])
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_test)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("--preset", default="")
    p.add_argument("--config", default="")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-sim", type=int, default=None)
    p.add_argument("--d-grid", default="")
    p.add_argument("--deltas", default="")
    p.add_argument("--out", default="")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("oracle", help="exact quantities for a declared design")
    p.add_argument("--hypothesis", default="time")
    p.add_argument("--a", type=int, default=2)
    p.add_argument("--d", type=int, default=0)
    p.add_argument("--subplot", default="")
    p.add_argument("--n", required=True, help="group sizes, e.g. 10,15")
    p.add_argument("--cov", required=True, help="per-group specs, e.g. ar:0.6,ar:0.65")
    p.add_argument("--quantity", default="tau_p",
                   help="tau_p|tau_cq|moments|traces|levels|spectrum|all (comma list ok)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("gen", help="write a synthetic dataset CSV")
    p.add_argument("--d", type=int, default=0)
    p.add_argument("--subplot", default="")
    p.add_argument("--n", required=True)
    p.add_argument("--cov", required=True)
    p.add_argument("--means", default="zero",
                   help="zero|shift:D|trend:D|onepoint:D|csv:PATH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("overlap", help="subsample-overlap law check")
    p.add_argument("--n", required=True, help="group sizes, e.g. 4 or 10,15")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--b-draws", type=int, required=True)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_overlap)

    p = sub.add_parser("report", help="render figures from a study CSV")
    p.add_argument("--study", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
