"""Command line entry point: ``weighted-ensembles <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .cohomology import solve_v
from .conjugacy import Conjugacy, ConjugacyField, conjugacy_audit, torus_distance
from .dynamics import trajectory_direct
from .ensemble import expect_eq, expect_mc, mode_table, quad_expectation, sample_initial
from .errors import ConfigError, WeightedEnsembleError
from .experiment import EXIT_AUDIT, _jsonable, build_spec, build_system, parse_config, run_experiment
from .model import resonance_audit
from .torus_fourier import dump_csv


def _floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.replace(";", ",").split(",") if x.strip()])


def parse_t_grid(text: str) -> np.ndarray:
    """``a,b,c`` for explicit times or ``start:stop:count`` for a log-spaced grid."""
    if ":" in text:
        start, stop, count = text.split(":")
        return np.logspace(np.log10(float(start)), np.log10(float(stop)), int(count))
    return _floats(text)


def _print_json(obj) -> None:
    print(json.dumps(_jsonable(obj), indent=2, sort_keys=True))


def cmd_dump_series(args) -> int:
    cfg = parse_config(args.model)
    model = build_system(cfg)
    if args.which == "v":
        if args.I is None:
            raise ConfigError("--I is required for the v series", "--I")
        series = solve_v(model, _floats(args.I)).v
    else:
        series = getattr(model, args.which)
    text = dump_csv(series)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_audit(args) -> int:
    cfg = parse_config(args.model)
    model = build_system(cfg)
    a = cfg.audit
    report = resonance_audit(model, args.K or a["K"], args.grid_n or a["grid_n"], args.tau or a["tau"],
                             modes=args.modes or a["modes"], raise_on_failure=False)
    _print_json(report.to_dict())
    return 0 if report.passed else EXIT_AUDIT


def cmd_solve_v(args) -> int:
    model = build_system(parse_config(args.model))
    sol = solve_v(model, _floats(args.I))
    modes, coeffs = sol.v.support(args.floor)
    _print_json({
        "I": sol.action_I,
        "omega": sol.omega,
        "residual_sup": sol.residual_sup,
        "min_divisor": sol.min_divisor,
        "coefficients": [{"n": n.tolist(), "re": c.real, "im": c.imag} for n, c in zip(modes, coeffs)],
    })
    return 0


def cmd_conjugacy_audit(args) -> int:
    cfg = parse_config(args.model)
    model = build_system(cfg)
    actions = model.box.grid(cfg.audit["conjugacy_grid"]) if args.I is None else _floats(args.I).reshape(1, -1)
    report = conjugacy_audit(model, actions, n_roundtrip=args.roundtrip)
    _print_json(report)
    return 0 if report["min_det"] > 0 else EXIT_AUDIT


def cmd_trajectory(args) -> int:
    model = build_system(parse_config(args.model))
    action = _floats(args.I)
    theta0 = _floats(args.theta0)
    t_grid = np.sort(parse_t_grid(args.t_grid))
    conj = Conjugacy(model, action)
    direct = trajectory_direct(model, action, theta0, t_grid, args.tol)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    dim = model.dim
    writer.writerow(["t"] + [f"theta_direct_{k + 1}" for k in range(dim)]
                    + [f"theta_conjugated_{k + 1}" for k in range(dim)] + ["defect"])
    for t, th in zip(t_grid, direct):
        phi = conj.psi(theta0, lift=True) + conj.a_bar * conj.omega_I * t
        tc = np.atleast_1d(conj.psi_inverse(phi, lift=True))
        defect = float(np.max(torus_distance(th, tc)))
        writer.writerow([repr(float(t))] + [repr(float(x)) for x in np.atleast_1d(th)]
                        + [repr(float(x)) for x in tc] + [repr(defect)])
    if args.out:
        out.close()
    return 0


def cmd_evolve(args) -> int:
    model_cfg = parse_config(args.model)
    ens_cfg = parse_config(args.ensemble) if args.ensemble else model_cfg
    model = build_system(model_cfg)
    spec = build_spec(ens_cfg, model)
    t_grid = parse_t_grid(args.t_grid)
    table = mode_table(spec, model)
    eq = expect_eq(spec, model).value
    samples = sample_initial(spec, model, spec.n_samples)
    field_ = ConjugacyField(model)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["t", "mean_mc", "stderr_mc", "mean_quad", "abs_diff_from_eq"])
    for t in t_grid:
        mean, se = expect_mc(spec, model, t, samples, field_)
        _, diff = quad_expectation(spec, model, t, table)
        writer.writerow([repr(float(x)) for x in (t, mean, se, eq + diff, abs(diff))])
    if args.out:
        out.close()
    return 0


def cmd_run(args) -> int:
    report = run_experiment(args.config, args.out)
    summary = {
        "status": report.status,
        "exit_code": report.exit_code,
        "fitted_slope": report.fitted_slope,
        "fitted_logC": report.fitted_logC,
        "n_used": report.n_used,
    }
    _print_json(summary)
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weighted-ensembles",
                                     description="Weighted integrable systems: conjugacy, ensembles, convergence rates.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump-series", help="write Fourier coefficients as CSV (n_1..n_N, re, im)")
    p.add_argument("--model", required=True, help="TOML config with a [model] table")
    p.add_argument("--which", choices=["weight", "a", "rho", "b", "v"], default="b")
    p.add_argument("--I", help="action for --which v, comma separated")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_series)

    p = sub.add_parser("audit", help="resonance and twist audit as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--modes", choices=["all", "support"])
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("solve-v", help="solve the cohomological equation at one action")
    p.add_argument("--model", required=True)
    p.add_argument("--I", required=True)
    p.add_argument("--floor", type=float, default=1e-14, help="omit coefficients below this modulus")
    p.set_defaults(func=cmd_solve_v)

    p = sub.add_parser("conjugacy-audit", help="Jacobian, degree, C_psi and round-trip diagnostics")
    p.add_argument("--model", required=True)
    p.add_argument("--I", help="single action; default is the audit grid")
    p.add_argument("--roundtrip", type=int, default=1000)
    p.set_defaults(func=cmd_conjugacy_audit)

    p = sub.add_parser("trajectory", help="direct vs conjugated flow along a time grid")
    p.add_argument("--model", required=True)
    p.add_argument("--I", required=True)
    p.add_argument("--theta0", required=True)
    p.add_argument("--t-grid", required=True, help="a,b,c or start:stop:count (log spaced)")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("evolve", help="ensemble averages by Monte Carlo and quadrature")
    p.add_argument("--model", required=True)
    p.add_argument("--ensemble", help="config with an [ensemble] table (defaults to --model)")
    p.add_argument("--t-grid", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("run", help="full convergence experiment; writes results.csv and report.json")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except WeightedEnsembleError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
