import numpy as np
import pytest

from weighted_ensembles.errors import DegeneracyError, DomainError, PositivityError, ResonanceError
from weighted_ensembles.model import (
    Box,
    Polynomial,
    build_model,
    half_modes,
    resonance_audit,
    support_modes,
    sys_a,
    sys_b_rho,
    sys_c_exponent,
    unweighted,
)
from weighted_ensembles.torus_fourier import TorusSeries, grid_points, to_grid

QUARTER = Polynomial({(2, 0): 0.5, (1, 1): 0.25, (0, 2): 0.5})


def test_unweighted_reduction(model_flat):
    theta = grid_points(1, 33)
    assert np.allclose(np.real(model_flat.a(theta)), 1.0, atol=1e-15)
    assert np.allclose(np.real(model_flat.rho(theta)), 1.0, atol=1e-15)
    assert model_flat.a_bar == pytest.approx(1.0, abs=1e-15)
    assert model_flat.b.abs_sum() <= 1e-15


def test_sys_a_fields(model_a):
    assert model_a.a_bar == pytest.approx(1.0, abs=1e-14)
    assert model_a.b[1] == pytest.approx(0.25, abs=1e-14)
    assert model_a.rho[1] == pytest.approx(0.25, abs=1e-14)
    theta = np.linspace(0, 2 * np.pi, 17)[:, None]
    assert np.allclose(np.real(model_a.a(theta)), 1.0 / (1.0 + 0.5 * np.cos(theta[:, 0])), atol=1e-12)


def test_sys_b_fields(model_b):
    assert model_b.a_bar == pytest.approx(1.0, abs=1e-14)
    expect = sys_b_rho() - TorusSeries.constant(2, 1, 1.0)
    assert np.max(np.abs(model_b.b.with_band(1).coeffs - expect.coeffs)) <= 1e-14
    # nothing outside band 1
    assert model_b.b.abs_sum() - model_b.b.with_band(1).abs_sum() <= 1e-13


@pytest.mark.parametrize("name", ["model_a", "model_b", "model_c"])
def test_model_invariants(name, request):
    model = request.getfixturevalue(name)
    theta = grid_points(model.dim, 2 * (2 * model.band + 1))
    assert abs(model.b.mean) <= 1e-12
    assert np.max(np.abs(np.real(model.a(theta) * model.rho(theta)) - 1.0)) <= 1e-10
    nominal = grid_points(model.dim, 2 * model.band + 1)
    assert model.a_bar * np.mean(1.0 / np.real(model.a(nominal))) == pytest.approx(1.0, abs=1e-10)
    assert np.min(np.real(model.weight(theta))) > 0


def test_a_bar_stable_under_refinement():
    coarse, fine = sys_a(16), sys_a(32)
    assert abs(coarse.a_bar - fine.a_bar) <= 1e-10


def test_sys_c_construction():
    s = sys_c_exponent()
    m = np.exp(np.real(to_grid(s, 257)))
    assert m.min() == pytest.approx(0.3, rel=1e-12)
    assert s.band == 4 and s.is_hermitian(1e-15)


def test_positivity_error():
    m = TorusSeries.from_dict(1, 1, {0: 0.2, 1: 0.5}, real=True)
    with pytest.raises(PositivityError):
        build_model(Box((1.0,), (2.0,)), Polynomial.kinetic(1), m, band=4)


def test_empty_box():
    with pytest.raises(DomainError):
        Box((2.0,), (1.0,))


def test_omega_examples():
    one = unweighted([1.0], [2.0], band=2)
    assert np.allclose(one.omega(1.5), [1.5])
    two = unweighted([0.5, 0.5], [2.0, 2.0], band=2)
    assert np.allclose(two.omega([1.0, 1.618]), [1.0, 1.618])
    mixed = unweighted([0.5, 0.5], [2.0, 2.0], band=2, hamiltonian=QUARTER)
    assert np.allclose(mixed.omega([1.0, 1.0]), [1.25, 1.25])
    assert np.allclose(mixed.d_omega([1.0, 1.0]), [[1.0, 0.25], [0.25, 1.0]])
    assert np.allclose(two.d_omega([1.2, 1.3]), np.eye(2))


def test_omega_outside_box():
    one = unweighted([1.0], [2.0], band=2)
    with pytest.raises(DomainError):
        one.omega(2.5)


def test_d_omega_matches_finite_differences(rng):
    ham = Polynomial({(3, 0): 0.2, (1, 2): -0.1, (2, 0): 0.5, (0, 2): 0.5, (1, 1): 0.3})
    model = unweighted([0.5, 0.5], [2.0, 2.0], band=2, hamiltonian=ham)
    h = 1e-6
    for _ in range(20):
        x = 0.6 + 1.3 * rng.random(2)
        fd = np.stack([(model.omega(x + h * e) - model.omega(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        assert np.max(np.abs(fd - model.d_omega(x))) <= 1e-8
        assert np.allclose(model.d_omega(x), model.d_omega(x).T)


def test_resonance_audit_sys_a():
    report = resonance_audit(sys_a(16), K=16, grid_n=11, tau=1.0)
    assert report.alpha_eff >= 1.0 - 1e-12
    assert report.lambda_eff == pytest.approx(1.0)
    assert report.passed


def test_resonance_audit_names_resonant_mode():
    # I2/I1 = 3/2 on the grid point (1.0, 1.5)
    model = unweighted([1.0, 1.25], [1.5, 1.75], band=2)
    with pytest.raises(ResonanceError) as info:
        resonance_audit(model, K=3, grid_n=3, tau=1.0)
    n = np.array(info.value.mode)
    assert abs(n @ np.array(info.value.action)) <= 1e-12
    assert sorted(np.abs(n).tolist()) == [2, 3]


def test_resonance_audit_lambda_for_kinetic(model_b):
    report = resonance_audit(model_b, K=4, grid_n=5, tau=2.0, modes="support")
    assert report.lambda_eff == pytest.approx(1.0)


def test_degenerate_twist():
    ham = Polynomial({(1, 0): 1.0, (0, 2): 0.5})  # omega_1 constant -> D omega singular
    model = unweighted([1.0, 1.0], [1.2, 1.2], band=1, hamiltonian=ham)
    with pytest.raises(DegeneracyError):
        resonance_audit(model, K=1, grid_n=2, tau=1.0, modes="support")


def test_half_modes_cover_pairs():
    modes = half_modes(2, 2)
    assert len(modes) == (25 - 1) // 2
    keys = {tuple(n) for n in modes}
    assert not any(tuple(-k for k in n) in keys for n in keys)


def test_support_modes(model_b):
    modes = {tuple(n) for n in support_modes(model_b)}
    assert modes == {(1, 0), (1, 1)}
