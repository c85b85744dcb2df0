"""End-to-end convergence runs: config, audits, time sweep, rate fit, reports.

A run evolves one ensemble over a log-spaced time grid, takes the distance
to the weighted equilibrium from the mode quadrature, checks it against
Monte Carlo at small ``t`` and fits the decay exponent on the dyadic-block
envelope.  Outputs are ``results.csv`` and ``report.json``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohomology import residual, solve_v
from .conjugacy import ConjugacyField, conjugacy_audit
from .ensemble import (
    PROFILES,
    EnsembleSpec,
    Observable,
    ProductDensity,
    _integrate_mode,
    _integrate_zero,
    _nodes_for,
    cos_mode,
    expect_eq,
    expect_mc,
    mode_table,
    normalization,
    quad_expectation,
    random_trig,
    relevant_modes,
    sample_initial,
    sin_mode,
)
from .errors import (
    ConfigError,
    EstimatorDivergenceError,
    InsufficientDataError,
    InsufficientSignalError,
    WeightedEnsembleError,
)
from .model import (
    REFERENCE_SYSTEMS,
    Box,
    Polynomial,
    SystemModel,
    build_model,
    resonance_audit,
    unweighted,
)
from .torus_fourier import TorusSeries, decay_audit, grid_points

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

EXIT_OK = 0
EXIT_AUDIT = 2
EXIT_RATE = 3
EXIT_DIVERGENCE = 4

# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "model": {
        "system": "sys-a",
        "band": 16,
        "lower": None,
        "upper": None,
        "hamiltonian": None,
        "weight": None,
    },
    "ensemble": {
        "profile": "tilted",
        "tilt": 1.0,
        "angular": None,
        "observable": "cos",
        "observable_mode": None,
        "observable_band": 3,
        "observable_seed": 7,
        "samples": 100_000,
        "quad_nodes": 65,
        "seed": 0,
        "mode_band": 12,
        "cheb_nodes": 16,
        "mode_floor": 1e-12,
    },
    "grid": {
        "t_min": 1.0,
        "t_max": 1000.0,
        "count": 32,
        "mc_t_max": 10.0,
    },
    "audit": {
        "tau": None,
        "K": 8,
        "grid_n": 9,
        "modes": "support",
        "conjugacy_grid": 3,
        "roundtrip": 1000,
        "jacobian_tol": 1e-7,
        "degree_tol": 1e-8,
        "n_max": 3,
        "mode_t_min": 10.0,
        "mode_t_max": 1000.0,
        "mode_count": 24,
        "slope_max": -0.7,
        "divergence_sigma": 5.0,
    },
}

SYSTEMS = ("sys-a", "sys-b", "sys-c", "unweighted", "custom")
OBSERVABLES = ("cos", "sin", "random", "constant")


@dataclass
class RunConfig:
    model: dict
    ensemble: dict
    grid: dict
    audit: dict
    source: str = ""

    def to_dict(self) -> dict:
        return {"model": self.model, "ensemble": self.ensemble, "grid": self.grid, "audit": self.audit}


def _merge(section: str, given: dict) -> dict:
    out = dict(DEFAULTS[section])
    for key, value in given.items():
        if key not in out:
            raise ConfigError("unknown key", f"{section}.{key}")
        out[key] = value
    return out


def config_from_dict(raw: dict, source: str = "") -> RunConfig:
    """Validate a parsed config mapping and fill defaults."""
    for key in raw:
        if key not in DEFAULTS:
            raise ConfigError("unknown section", key)
    sections = {}
    for name in DEFAULTS:
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError("expected a table", name)
        sections[name] = _merge(name, given)
    m, e, g, a = sections["model"], sections["ensemble"], sections["grid"], sections["audit"]

    if m["system"] not in SYSTEMS:
        raise ConfigError(f"unknown system {m['system']!r}; choose from {SYSTEMS}", "model.system")
    if not isinstance(m["band"], int) or m["band"] < 1:
        raise ConfigError("band must be a positive integer", "model.band")
    if m["system"] in ("unweighted", "custom"):
        for key in ("lower", "upper"):
            if m[key] is None:
                raise ConfigError("required for this system", f"model.{key}")
    if m["system"] == "custom" and m["weight"] is None:
        raise ConfigError("custom systems need weight coefficients", "model.weight")
    if m["lower"] is not None:
        lo, hi = list(m["lower"]), list(m["upper"] or [])
        if len(lo) != len(hi):
            raise ConfigError("lower and upper have different lengths", "model.upper")
        for k, (x, y) in enumerate(zip(lo, hi)):
            if not x < y:
                raise ConfigError(f"lower {x} is not below upper {y} on axis {k}", f"model.lower[{k}]")
    dim = _config_dim(m)

    if e["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {e['profile']!r}", "ensemble.profile")
    if e["observable"] not in OBSERVABLES:
        raise ConfigError(f"unknown observable {e['observable']!r}", "ensemble.observable")
    for key in ("samples", "quad_nodes", "mode_band", "cheb_nodes", "observable_band"):
        if not isinstance(e[key], int) or e[key] < 1:
            raise ConfigError("must be a positive integer", f"ensemble.{key}")
    if e["quad_nodes"] < 3:
        raise ConfigError("need at least 3 nodes", "ensemble.quad_nodes")
    if e["observable_mode"] is not None and len(e["observable_mode"]) != dim:
        raise ConfigError(f"mode needs {dim} components", "ensemble.observable_mode")

    if not 0 < g["t_min"] < g["t_max"]:
        raise ConfigError("need 0 < t_min < t_max", "grid.t_min")
    if not isinstance(g["count"], int) or g["count"] < 2:
        raise ConfigError("need at least 2 times", "grid.count")

    if a["tau"] is None:
        a["tau"] = float(dim)
    if not a["tau"] > dim - 1:
        raise ConfigError(f"tau = {a['tau']} violates 2(N-1) < 2tau with N = {dim}", "audit.tau")
    if a["modes"] not in ("all", "support"):
        raise ConfigError("modes must be 'all' or 'support'", "audit.modes")
    return RunConfig(m, e, g, a, source)


def _config_dim(m: dict) -> int:
    if m["lower"] is not None:
        return len(m["lower"])
    return {"sys-a": 1, "sys-b": 2, "sys-c": 2}[m["system"]]


def parse_config(path) -> RunConfig:
    """Read a TOML run description (sections [model], [ensemble], [grid], [audit])."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file {path}")
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
    return config_from_dict(raw, str(path))


def _series_from_rows(dim: int, rows, key: str, constant: float | None = None) -> TorusSeries:
    terms = {}
    for i, row in enumerate(rows):
        if len(row) != dim + 2:
            raise ConfigError(f"rows need {dim} indices then re, im", f"{key}[{i}]")
        n = tuple(int(x) for x in row[:dim])
        terms[n] = terms.get(n, 0.0) + complex(row[dim], row[dim + 1])
    if constant is not None:
        zero = (0,) * dim
        terms[zero] = terms.get(zero, 0.0) + constant
    band = max([max(abs(k) for k in n) for n in terms] + [1])
    # complete one-sided terms with their conjugate partner
    return TorusSeries.from_dict(dim, band, terms, real=True)


def build_system(cfg: RunConfig) -> SystemModel:
    m = cfg.model
    if m["system"] in REFERENCE_SYSTEMS:
        return REFERENCE_SYSTEMS[m["system"]](band=m["band"])
    dim = _config_dim(m)
    ham = Polynomial.kinetic(dim)
    if m["hamiltonian"] is not None:
        ham = Polynomial([(tuple(int(p) for p in row[:-1]), float(row[-1])) for row in m["hamiltonian"]])
    if m["system"] == "unweighted":
        return unweighted(m["lower"], m["upper"], m["band"], ham)
    weight = _series_from_rows(dim, m["weight"], "model.weight")
    box = Box(tuple(m["lower"]), tuple(m["upper"]))
    return build_model(box, ham, weight.with_band(max(weight.band, m["band"])), m["band"], name="custom")


def build_spec(cfg: RunConfig, model: SystemModel) -> EnsembleSpec:
    e, dim = cfg.ensemble, model.dim
    first = (1,) + (0,) * (dim - 1)
    rows = e["angular"] if e["angular"] is not None else [list(first) + [0.25, 0.0]]
    h = _series_from_rows(dim, rows, "ensemble.angular", constant=1.0)
    kind = e["profile"]
    profile = PROFILES[kind](model.box, e["tilt"]) if kind == "tilted" else PROFILES[kind](model.box)
    f0 = ProductDensity(model, profile, h)
    mode = tuple(e["observable_mode"] or first)
    G = {
        "cos": lambda: cos_mode(dim, mode),
        "sin": lambda: sin_mode(dim, mode),
        "random": lambda: Observable.trig(random_trig(dim, e["observable_band"], e["observable_seed"]),
                                          name="random"),
        "constant": lambda: Observable.action_only(lambda a: 1.0 + 0.5 * a[:, 0], name="constant"),
    }[e["observable"]]()
    return EnsembleSpec(f0, G, n_samples=e["samples"], quad_nodes=e["quad_nodes"], seed=e["seed"],
                        mode_band=e["mode_band"], cheb_nodes=e["cheb_nodes"], mode_floor=e["mode_floor"])


# ---------------------------------------------------------------------------
# rate fitting


def dyadic_envelope(t, diffs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Block maxima of ``diffs`` over ``[2^k, 2^(k+1))``; returns (t, diff, index) of each maximum."""
    t, diffs = np.asarray(t, dtype=float), np.asarray(diffs, dtype=float)
    blocks = np.floor(np.log2(t) + 1e-12).astype(int)
    idx = []
    for b in np.unique(blocks):
        members = np.flatnonzero(blocks == b)
        idx.append(members[np.argmax(diffs[members])])
    idx = np.array(idx, dtype=int)
    return t[idx], diffs[idx], idx


def fit_rate(t_grid, diffs, stderrs, min_points: int = 5, snr: float = 10.0) -> tuple[float, float, int]:
    """Least-squares ``log diff = logC + slope log t`` on the dyadic upper envelope.

    Only points with ``diff > snr * stderr`` are used.
    """
    t = np.asarray(t_grid, dtype=float)
    d = np.abs(np.asarray(diffs, dtype=float))
    s = np.asarray(stderrs, dtype=float)
    if not (t.shape == d.shape == s.shape):
        raise ValueError("t_grid, diffs and stderrs must have the same length")
    usable = (d > snr * s) & (d > 0) & (t > 0)
    if usable.sum() < min_points:
        raise InsufficientSignalError(f"only {int(usable.sum())} points with diff > {snr:g} stderr")
    et, ed, _ = dyadic_envelope(t[usable], d[usable])
    if len(et) < 2:
        raise InsufficientSignalError("envelope has fewer than 2 blocks")
    slope, logC = np.polyfit(np.log(et), np.log(ed), 1)
    return float(slope), float(logC), int(len(et))


# ---------------------------------------------------------------------------
# report


@dataclass
class ConvergenceReport:
    t_grid: np.ndarray
    diffs: np.ndarray
    stderrs: np.ndarray
    envelope: np.ndarray
    fitted_slope: float | None
    fitted_logC: float | None
    n_used: int
    status: str
    exit_code: int
    equilibrium: dict = field(default_factory=dict)
    mode_audits: list = field(default_factory=list)
    mc_checks: list = field(default_factory=list)
    audit_stamps: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def first_block_ratio(self) -> float:
        """``sup_t t diff`` over its maximum on the first dyadic block ``[t_0, 2 t_0)``."""
        scaled = self.t_grid * self.diffs
        return float(scaled.max() / scaled[self.t_grid < 2 * self.t_grid[0]].max())

    @property
    def literal_ratio(self) -> float:
        """``sup_t t diff`` over ``t_0 diff(t_0)``; sensitive to zero crossings near ``t_0``."""
        scaled = self.t_grid * self.diffs
        return float(scaled.max() / scaled[0]) if scaled[0] > 0 else float("inf")

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "diff", "stderr", "envelope"])
        for row in zip(self.t_grid, self.diffs, self.stderrs, self.envelope):
            writer.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return _jsonable({
            "status": self.status,
            "exit_code": self.exit_code,
            "fitted_slope": self.fitted_slope,
            "fitted_logC": self.fitted_logC,
            "n_used": self.n_used,
            "first_block_ratio": self.first_block_ratio if len(self.diffs) else None,
            "literal_ratio": self.literal_ratio if len(self.diffs) else None,
            "t_grid": self.t_grid,
            "diffs": self.diffs,
            "stderrs": self.stderrs,
            "envelope": self.envelope,
            "equilibrium": self.equilibrium,
            "mode_audits": self.mode_audits,
            "mc_checks": self.mc_checks,
            "audit_stamps": self.audit_stamps,
            "config": self.config,
        })

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "results.csv", out / "report.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def validate_report(report: dict) -> None:
    """A report must carry every audit stamp."""
    required = ("resonance", "conjugacy", "cohomology", "model", "decay_b", "ensemble")
    stamps = report.get("audit_stamps") or {}
    missing = [k for k in required if k not in stamps]
    if missing:
        raise ValueError(f"report is missing audit stamps: {missing}")


# ---------------------------------------------------------------------------
# audits


def model_audits(cfg: RunConfig, model: SystemModel) -> tuple[dict, bool]:
    """Resonance, model-invariant, cohomology, conjugacy and decay audits; returns (stamps, passed)."""
    a = cfg.audit
    stamps, ok = {}, True
    res = resonance_audit(model, a["K"], a["grid_n"], a["tau"], modes=a["modes"], raise_on_failure=False)
    stamps["resonance"] = res.to_dict()
    ok &= res.passed

    theta = grid_points(model.dim, 2 * (2 * model.band + 1))
    a_rho = float(np.max(np.abs(np.real(model.a(theta) * model.rho(theta)) - 1.0)))
    stamps["model"] = {
        "a_bar": model.a_bar,
        "b_mean": abs(model.b.mean),
        "a_rho_identity_error": a_rho,
        "weight_min": float(np.min(np.real(model.weight(theta)))),
    }

    actions = model.box.grid(a["conjugacy_grid"])
    if not res.passed:
        stamps["cohomology"] = {"skipped": "resonance audit failed"}
        stamps["conjugacy"] = {"skipped": "resonance audit failed"}
    else:
        try:
            sols = [solve_v(model, act) for act in actions]
            resid = max(residual(s, model, 2) for s in sols)
            stamps["cohomology"] = {"max_residual": resid, "min_divisor": min(s.min_divisor for s in sols),
                                    "actions": len(sols)}
            conj = conjugacy_audit(model, actions, n_roundtrip=a["roundtrip"])
            conj["passed"] = bool(conj["min_det"] > 0 and conj["max_jacobian_identity_error"] <= a["jacobian_tol"]
                                  and abs(conj["degree"] - 1.0) <= a["degree_tol"])
            stamps["conjugacy"] = conj
            ok &= conj["passed"]
        except WeightedEnsembleError as exc:
            stamps["cohomology"] = stamps.get("cohomology", {"error": str(exc)})
            stamps["conjugacy"] = {"error": str(exc), "passed": False}
            ok = False
    try:
        fit = decay_audit(model.b)
        stamps["decay_b"] = {"slope": fit.slope, "intercept": fit.intercept, "residual": fit.residual,
                             "shells": fit.shells}
    except InsufficientDataError as exc:
        stamps["decay_b"] = {"skipped": str(exc)}
    return stamps, bool(ok)


def mode_decay_audit(table, model, n_max: int, t_values) -> list:
    """``t |I_n(t)|`` over ``t_values`` for half-plane modes with ``|n|_inf <= n_max``."""
    keep = set(relevant_modes(table).tolist())
    out = []
    for p, n in enumerate(table.modes):
        if np.abs(n).max() > n_max:
            continue
        if p not in keep:
            out.append({"n": n.tolist(), "negligible": True})
            continue
        vals = np.array([abs(_integrate_mode(table, p, n, t, _nodes_for(model, n, t))) for t in t_values])
        scaled = t_values * vals
        out.append({
            "n": n.tolist(),
            "negligible": False,
            "t_abs_I_at_start": float(scaled[0]),
            "sup_t_abs_I": float(scaled.max()),
            "ratio": float(scaled.max() / scaled[0]) if scaled[0] > 0 else float("inf"),
        })
    return out


# ---------------------------------------------------------------------------
# pipeline


def run_experiment(config_path=None, out_dir=None, cfg: RunConfig | None = None,
                   mc: bool = True) -> ConvergenceReport:
    """Run audits, evolve the ensemble over the time grid and fit the rate.

    Results are written to ``out_dir`` when given.  The returned report's
    ``exit_code`` is 0 (pass), 2 (audit failure), 3 (rate failure) or
    4 (estimator divergence).
    """
    if cfg is None:
        cfg = parse_config(config_path)
    model = build_system(cfg)
    spec = build_spec(cfg, model)
    g, a = cfg.grid, cfg.audit
    t_grid = np.logspace(np.log10(g["t_min"]), np.log10(g["t_max"]), g["count"])

    stamps, passed = model_audits(cfg, model)
    config = cfg.to_dict()
    if not passed:
        empty = np.array([])
        report = ConvergenceReport(empty, empty, empty, empty, None, None, 0, "audit failure", EXIT_AUDIT,
                                   audit_stamps=stamps, config=config)
        if out_dir is not None:
            report.write(out_dir)
        return report

    table = mode_table(spec, model)
    eq = expect_eq(spec, model)
    zero = _integrate_zero(table)
    keep = relevant_modes(table)
    bound = table.error_bound(keep)
    stamps["ensemble"] = {
        "normalization": normalization(spec, model),
        "mode0_consistency": eq.discrepancy,
        "zero_mode_vs_eq": abs(zero - eq.value),
        "modes_kept": int(len(keep)),
        "quadrature_error_bound": bound,
    }
    equilibrium = {"value": eq.value, "modal": eq.modal, "zero_mode": zero}

    diffs = np.empty(len(t_grid))
    for i, t in enumerate(t_grid):
        diffs[i] = abs(quad_expectation(spec, model, t, table)[1])
    stderrs = np.full(len(t_grid), max(bound, 1e-15))
    envelope = np.maximum.accumulate(t_grid * diffs)

    # Monte Carlo agreement at small t
    mc_checks, diverged = [], False
    if mc:
        samples = sample_initial(spec, model, spec.n_samples)
        field_ = ConjugacyField(model)
        for t in t_grid[t_grid <= g["mc_t_max"]]:
            mean, se = expect_mc(spec, model, t, samples, field_)
            quad = eq.value + quad_expectation(spec, model, t, table)[1]
            z = abs(mean - quad) / se if se > 0 else (0.0 if mean == quad else math.inf)
            mc_checks.append({"t": float(t), "mc": mean, "stderr": se, "quad": quad, "z": z})
            diverged |= z > a["divergence_sigma"]

    mode_t = np.logspace(np.log10(a["mode_t_min"]), np.log10(a["mode_t_max"]), a["mode_count"])
    modes = mode_decay_audit(table, model, a["n_max"], mode_t)

    slope = logC = None
    n_used = 0
    if len(keep) == 0:
        status, code = "degenerate: constant mode only", EXIT_OK
    else:
        try:
            slope, logC, n_used = fit_rate(t_grid, diffs, stderrs)
            status, code = ("pass", EXIT_OK) if slope <= a["slope_max"] else ("rate failure", EXIT_RATE)
        except InsufficientSignalError as exc:
            status, code = f"insufficient signal: {exc}", EXIT_RATE
    if diverged:
        status, code = "estimator divergence", EXIT_DIVERGENCE
    report = ConvergenceReport(t_grid, diffs, stderrs, envelope, slope, logC, n_used, status, code,
                               equilibrium, modes, mc_checks, stamps, config)
    if out_dir is not None:
        report.write(out_dir)
    return report


def check(report: ConvergenceReport) -> None:
    """Raise the error matching a failing report (estimator divergence only)."""
    if report.exit_code == EXIT_DIVERGENCE:
        worst = max(report.mc_checks, key=lambda c: c["z"])
        raise EstimatorDivergenceError(
            f"Monte Carlo and quadrature differ by {worst['z']:.1f} sigma at t={worst['t']:.4g}")


__all__ = [
    "ConvergenceReport",
    "RunConfig",
    "build_spec",
    "build_system",
    "check",
    "config_from_dict",
    "dyadic_envelope",
    "fit_rate",
    "parse_config",
    "run_experiment",
    "validate_report",
]
