"""Acceptance criteria 1-9, each reporting one PASS/FAIL line."""

import time

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from weighted_ensembles.cohomology import solve_v
from weighted_ensembles.conjugacy import Conjugacy, ConjugacyField, c_psi, torus_distance
from weighted_ensembles.dynamics import trajectory_direct
from weighted_ensembles.ensemble import invariance_audit, marginal_W, mode_M, phase, v_field
from weighted_ensembles.experiment import build_spec, config_from_dict, run_experiment
from weighted_ensembles.model import sys_a, sys_b
from weighted_ensembles.torus_fourier import TorusSeries, grid_points

pytestmark = pytest.mark.acceptance


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def actions_in(model, count, seed):
    rng = np.random.default_rng(seed)
    return np.array(model.box.lower) + rng.random((count, model.dim)) * np.array(model.box.widths)


# --- 1


def test_criterion_1_closed_form_cohomology():
    start = time.perf_counter()
    a, b = sys_a(24), sys_b(24)
    va = solve_v(a, [1.5]).v
    err_a = np.max(np.abs(va.coeffs - TorusSeries.from_dict(1, 24, {1: 1 / 6j, -1: -1 / 6j}).coeffs))
    vb = solve_v(b, [1.0, 1.618]).v
    # 0.3 sin(t1) / 1.0 - 0.2 cos(t1 + t2) / 2.618
    closed = TorusSeries.from_dict(2, 24, {(1, 0): 0.15 / 1j, (-1, 0): -0.15 / 1j,
                                           (1, 1): -0.1 / 2.618, (-1, -1): -0.1 / 2.618})
    err_b = np.max(np.abs(vb.coeffs - closed.coeffs))
    elapsed = time.perf_counter() - start
    report(1, err_a <= 1e-12 and err_b <= 1e-12 and elapsed < 1.0,
           f"coef err A={err_a:.2e} B={err_b:.2e}, {elapsed:.2f}s")


# --- 2


def test_criterion_2_jacobian_identity(model_a, model_b, model_c):
    start = time.perf_counter()
    worst, degree = {}, 0.0
    cases = [(model_a, model_a.box.grid(5), 1e-9), (model_b, model_b.box.grid(3), 1e-9),
             (model_c, np.array([[1.1, 1.618], [1.05, 1.6], [1.15, 1.65]]), 1e-7)]
    ok = True
    for model, actions, tol in cases:
        theta = grid_points(model.dim, 2 * (2 * model.band + 1))
        target = model.a_bar / np.real(model.a(theta))
        err = 0.0
        for action in actions:
            conj = Conjugacy(model, action)
            det = conj.jacobian_det(theta)
            err = max(err, float(np.max(np.abs(det - target))))
            degree = max(degree, abs(float(det.mean()) - 1.0))
        worst[model.name] = err
        ok &= err <= tol
    elapsed = time.perf_counter() - start
    ok &= degree <= 1e-8 and elapsed < 5.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(2, ok, f"sup|det - a_bar/a|: {detail}; |degree-1|={degree:.1e}; {elapsed:.1f}s")


# --- 3


def test_criterion_3_linearization_cross_oracle(model_a, model_b, model_c):
    start = time.perf_counter()
    times = [1.0, 10.0, 100.0]
    worst = {}
    for seed, model in enumerate((model_a, model_b, model_c)):
        actions = actions_in(model, 100, seed)
        theta0 = np.random.default_rng(100 + seed).random((100, model.dim)) * 2 * np.pi
        direct = trajectory_direct(model, actions, theta0, times, tol=1e-10)
        field_ = ConjugacyField(model)
        worst[model.name] = max(float(np.max(torus_distance(direct[k], field_.flow(actions, theta0, t))))
                                for k, t in enumerate(times))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 60
    report(3, ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s")


# --- 4


def _rho_samples(model, count, seed):
    # rejection sampling of rho dtheta on the torus
    rng = np.random.default_rng(seed)
    theta = grid_points(model.dim, 4 * model.band + 1)
    env = 1.2 * float(np.real(model.rho(theta)).max())
    out = []
    while sum(len(x) for x in out) < count:
        th = rng.random((4 * count, model.dim)) * 2 * np.pi
        keep = rng.random(len(th)) * env < np.real(model.rho(th))
        out.append(th[keep])
    return np.concatenate(out)[:count]


def test_criterion_4_pushforward_uniformity(model_a, model_b, model_c):
    start = time.perf_counter()
    pvals = {}
    for model, action in ((model_a, [1.5]), (model_b, [1.0, 1.618]), (model_c, [1.1, 1.618])):
        theta = _rho_samples(model, 100_000, seed=7)
        phi = Conjugacy(model, action).psi(theta)
        if model.dim == 1:
            counts, _ = np.histogram(phi[:, 0], bins=64, range=(0, 2 * np.pi))
        else:
            counts, _, _ = np.histogram2d(phi[:, 0], phi[:, 1], bins=16, range=[(0, 2 * np.pi)] * 2)
        pvals[model.name] = float(stats.chisquare(counts.ravel()).pvalue)
    elapsed = time.perf_counter() - start
    ok = min(pvals.values()) > 0.01 and elapsed < 10
    report(4, ok, "chi2 p: " + ", ".join(f"{k}={v:.3f}" for k, v in pvals.items()) + f"; {elapsed:.1f}s")


# --- 5


def test_criterion_5_invariant_measure(model_a, model_b):
    start = time.perf_counter()
    t_list = [1.0, 7.3, 50.0]
    one = {"cos t1": lambda a, t: np.cos(t[:, 0]), "sin t1": lambda a, t: np.sin(t[:, 0])}
    two = dict(one, **{"cos(t1+t2)": lambda a, t: np.cos(t[:, 0] + t[:, 1])})
    entries = invariance_audit(model_a, one, t_list, 10**6, seed=1)
    entries += invariance_audit(model_b, two, t_list, 10**6, seed=2)
    max_z = max(e.z for e in entries)
    (leb,) = invariance_audit(model_a, {"cos t1": one["cos t1"]}, [1.0], 10**6, seed=3, reference="lebesgue")
    elapsed = time.perf_counter() - start
    ok = not any(e.flagged for e in entries) and leb.z > 5 and elapsed < 120
    report(5, ok, f"max z invariant={max_z:.2f} over {len(entries)} checks; lebesgue z={leb.z:.1f}; {elapsed:.1f}s")


# --- 6, 7, 9 share the full pipeline runs

RATE_CASES = {
    "sys-a cos": {"model": {"system": "sys-a", "band": 24}},
    "sys-a random": {"model": {"system": "sys-a", "band": 24}, "ensemble": {"observable": "random"}},
    "sys-b cos": {"model": {"system": "sys-b", "band": 24}},
    "sys-b random": {"model": {"system": "sys-b", "band": 24}, "ensemble": {"observable": "random"}},
}


@pytest.fixture(scope="module")
def rate_runs(tmp_path_factory):
    start = time.perf_counter()
    runs = {}
    for name, raw in RATE_CASES.items():
        out = tmp_path_factory.mktemp(name.replace(" ", "_"))
        runs[name] = (run_experiment(cfg=config_from_dict(raw), out_dir=out), out)
    return runs, time.perf_counter() - start


def test_criterion_6_main_rate(rate_runs):
    runs, elapsed = rate_runs
    ok, parts = elapsed < 600, []
    for name, (rep, _) in runs.items():
        good = (rep.exit_code == 0 and -1.3 <= rep.fitted_slope <= -0.7 and rep.n_used >= 8
                and rep.first_block_ratio <= 10)
        ok &= good
        parts.append(f"{name}: slope={rep.fitted_slope:.3f} pts={rep.n_used} "
                     f"ratio={rep.first_block_ratio:.2f} (literal {rep.literal_ratio:.1f})")
    report(6, ok, "; ".join(parts) + f"; {elapsed:.0f}s")


def test_criterion_7_per_mode_decay(rate_runs):
    runs, _ = rate_runs
    ok, worst, count = True, 0.0, 0
    for rep, _ in runs.values():
        for entry in rep.mode_audits:
            if entry["negligible"]:
                continue
            count += 1
            worst = max(worst, entry["ratio"])
            ok &= np.isfinite(entry["sup_t_abs_I"]) and entry["ratio"] <= 10
    report(7, ok, f"max sup t|I_n| / (t0 |I_n(t0)|) = {worst:.2f} over {count} modes with |n|_inf <= 3")


def test_criterion_8_bound_shapes(model_a, model_b):
    start = time.perf_counter()
    margin_ok, worst_excess = True, -np.inf
    for model in (model_a, model_b):
        spec = build_spec(config_from_dict({"model": {"system": model.name}}), model)
        actions = model.box.grid(10) if model.dim == 1 else actions_in(model, 10, 3)
        W, _ = marginal_W(spec, model, actions)
        for n in np.array(np.meshgrid(*[range(-4, 5)] * model.dim)).reshape(model.dim, -1).T:
            if not n.any():
                continue
            excess = np.abs(mode_M(spec, model, n, actions)) - W
            worst_excess = max(worst_excess, float(excess.max()))
            margin_ok &= bool(np.all(excess <= 1e-9))

    spec = build_spec(config_from_dict({"model": {"system": "sys-a"}}), model_a)
    x = np.linspace(1.0, 2.0, 401)
    W, W1 = marginal_W(spec, model_a, x[:, None])
    C = c_psi(model_a, model_a.box.grid(21))
    ratio = 0.0
    for n in (1, 2, 3, 4):
        dM = np.gradient(mode_M(spec, model_a, [n], x[:, None]), x)
        lhs = np.trapezoid(np.abs(dM), x)
        ratio = max(ratio, lhs / (np.trapezoid(W1, x) + n * C * np.trapezoid(W, x)))

    rng = np.random.default_rng(8)
    v_err = 0.0
    for _ in range(100):
        action = actions_in(model_b, 1, int(rng.integers(1 << 30)))[0]
        n = rng.integers(-4, 5, 2)
        if not n.any():
            continue
        grad = model_b.a_bar * (model_b.d_omega(action).T @ n)
        v_err = max(v_err, abs(float(v_field(model_b, n, action) @ grad) - 1.0))
    # the phase really is a_bar n.omega
    assert phase(model_b, [1, 1], [1.0, 1.6]) == pytest.approx(model_b.a_bar * 2.6)
    elapsed = time.perf_counter() - start
    ok = margin_ok and ratio <= 1.1 and v_err <= 1e-12 and elapsed < 30
    report(8, ok, f"max(|M_n|-W)={worst_excess:.1e}; dM L1 / bound={ratio:.3f}; "
                  f"|V.grad Phi - 1|={v_err:.1e}; {elapsed:.1f}s")


def test_criterion_9_determinism(rate_runs, tmp_path):
    runs, _ = rate_runs
    same = True
    for name in ("sys-a cos", "sys-a random"):
        _, out = runs[name]
        run_experiment(cfg=config_from_dict(RATE_CASES[name]), out_dir=tmp_path / name.replace(" ", "_"))
        same &= (tmp_path / name.replace(" ", "_") / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
    report(9, same, "results.csv bit-identical across repeated runs" if same else "results.csv differs")
