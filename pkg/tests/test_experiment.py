import json

import numpy as np
import pytest

from weighted_ensembles.errors import ConfigError, InsufficientSignalError
from weighted_ensembles.experiment import (
    DEFAULTS,
    EXIT_OK,
    EXIT_RATE,
    ConvergenceReport,
    build_spec,
    build_system,
    config_from_dict,
    dyadic_envelope,
    fit_rate,
    parse_config,
    run_experiment,
    validate_report,
)

FLAT = {"model": {"system": "unweighted", "lower": [1.0], "upper": [2.0], "band": 4},
        "ensemble": {"samples": 20_000, "mode_band": 6},
        "grid": {"count": 24}}


def small(**overrides):
    raw = json.loads(json.dumps(FLAT))
    for section, values in overrides.items():
        raw.setdefault(section, {}).update(values)
    return config_from_dict(raw)


# --- rate fit


def test_fit_exact_power_law():
    t = np.logspace(0, 3, 32)
    slope, logC, n = fit_rate(t, 2 / t, np.full_like(t, 1e-12))
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert logC == pytest.approx(np.log(2), abs=1e-12)
    assert n == 10


def test_fit_oscillatory_envelope():
    t = np.logspace(0, 3, 200)
    slope, _, _ = fit_rate(t, np.abs(np.sin(5 * t)) / t, np.full_like(t, 1e-9))
    assert slope == pytest.approx(-1.0, abs=0.1)


def test_fit_insufficient_signal():
    t = np.logspace(0, 3, 32)
    with pytest.raises(InsufficientSignalError):
        fit_rate(t, 1e-3 / t, np.full_like(t, 1.0))
    with pytest.raises(ValueError):
        fit_rate(t, 1 / t, np.ones(3))


def test_dyadic_blocks():
    t = np.array([1.0, 1.5, 2.0, 3.9, 4.0])
    et, ed, idx = dyadic_envelope(t, [0.1, 0.3, 0.2, 0.1, 0.05])
    assert idx.tolist() == [1, 2, 4]
    assert et.tolist() == [1.5, 2.0, 4.0]


# --- config


def test_minimal_config_defaults():
    cfg = parse_config("configs/minimal.toml")
    assert cfg.model["band"] == 16
    assert cfg.ensemble["samples"] == 100_000
    assert cfg.ensemble["quad_nodes"] == 65
    assert cfg.grid["count"] == 32 and cfg.grid["t_min"] == 1.0 and cfg.grid["t_max"] == 1000.0
    assert cfg.audit["tau"] == 1.0


@pytest.mark.parametrize("raw, path", [
    ({"model": {"system": "unweighted", "lower": [1.0, 3.0], "upper": [2.0, 2.0]}}, "model.lower[1]"),
    ({"ensemble": {"bogus": 1}}, "ensemble.bogus"),
    ({"extra": {}}, "extra"),
    ({"model": {"system": "sys-z"}}, "model.system"),
    ({"grid": {"t_min": 5.0, "t_max": 1.0}}, "grid.t_min"),
    ({"ensemble": {"quad_nodes": 0}}, "ensemble.quad_nodes"),
])
def test_config_errors_name_key(raw, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.key_path == path


def test_config_tau_constraint():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"model": {"system": "sys-b"}, "audit": {"tau": 0.5}})
    assert "2(N-1) < 2tau" in str(info.value)
    assert info.value.key_path == "audit.tau"


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ConfigError):
        parse_config(bad)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.toml")


def test_custom_system(tmp_path):
    path = tmp_path / "custom.toml"
    path.write_text(
        '[model]\nsystem = "custom"\nlower = [1.0]\nupper = [2.0]\nband = 8\n'
        "weight = [[0, 1.0, 0.0], [1, 0.2, 0.0]]\n"
        "hamiltonian = [[2, 0.5]]\n"
    )
    model = build_system(parse_config(path))
    assert model.dim == 1
    theta = np.array([[0.0], [np.pi]])
    assert np.allclose(np.real(model.weight(theta)), [1.4, 0.6])


def test_defaults_not_mutated():
    config_from_dict({"model": {"system": "sys-b"}})
    assert DEFAULTS["audit"]["tau"] is None


# --- pipeline


@pytest.fixture(scope="module")
def flat_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("flat")
    return run_experiment(cfg=small(), out_dir=out), out


def test_unweighted_rate(flat_report):
    report, _ = flat_report
    assert report.exit_code == EXIT_OK and report.status == "pass"
    assert report.fitted_slope <= -0.9
    assert np.all(np.diff(report.t_grid) > 0) and np.all(report.diffs >= 0)
    assert np.all(report.envelope == np.maximum.accumulate(report.t_grid * report.diffs))
    assert all(c["z"] <= 5 for c in report.mc_checks)


def test_report_files(flat_report):
    report, out = flat_report
    data = json.loads((out / "report.json").read_text())
    validate_report(data)
    assert data["config"]["ensemble"]["quad_nodes"] == 65
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == "t,diff,stderr,envelope" and len(lines) == 25
    with pytest.raises(ValueError):
        validate_report({"audit_stamps": {"resonance": {}}})


def test_determinism(flat_report, tmp_path):
    report, out = flat_report
    again = run_experiment(cfg=small(), out_dir=tmp_path)
    assert (tmp_path / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
    assert again.mc_checks == report.mc_checks


def test_constant_mode_only():
    report = run_experiment(cfg=small(ensemble={"observable": "constant"}))
    assert report.status == "degenerate: constant mode only"
    assert report.exit_code == EXIT_OK and report.fitted_slope is None
    assert np.all(report.diffs == 0)
    assert all(c["z"] <= 3 for c in report.mc_checks)


def test_rate_failure_on_stationary_profile():
    # flat action profile and theta independent density: the ensemble is invariant, no signal
    cfg = small(ensemble={"profile": "flat", "angular": []})
    report = run_experiment(cfg=cfg, mc=False)
    assert report.exit_code in (EXIT_OK, EXIT_RATE)
    if report.exit_code == EXIT_RATE:
        assert report.status.startswith("insufficient signal") or report.status == "rate failure"


def test_audit_failure_stops_run():
    # the audit grid contains I = (1, 1.5), where (3, -2) . omega = 0
    cfg = small(model={"lower": [1.0, 1.25], "upper": [1.5, 1.75]},
                audit={"K": 4, "grid_n": 3, "modes": "all"})
    report = run_experiment(cfg=cfg, mc=False)
    assert report.exit_code == 2 and len(report.diffs) == 0
    assert "resonance" in report.audit_stamps


def test_block_ratio_properties():
    t = np.array([1.0, 1.5, 2.0, 4.0])
    r = ConvergenceReport(t, np.array([0.01, 0.5, 0.2, 0.1]), np.zeros(4), np.zeros(4), None, None, 0, "", 0)
    assert r.first_block_ratio == pytest.approx(0.75 / 0.75)
    assert r.literal_ratio == pytest.approx(0.75 / 0.01)


def test_build_spec_observables(model_b):
    for kind in ("cos", "sin", "random", "constant"):
        cfg = config_from_dict({"model": {"system": "sys-b"}, "ensemble": {"observable": kind}})
        spec = build_spec(cfg, model_b)
        vals = spec.G(np.array([[1.1, 1.6]]), np.array([[0.3, 0.4]]))
        assert vals.shape == (1,) and np.isfinite(vals).all()
