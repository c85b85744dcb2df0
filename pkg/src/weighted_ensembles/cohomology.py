"""Small-divisor solver for ``omega(I) . grad v = b`` with zero mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SmallDivisorError
from .model import RESONANCE_THRESHOLD, SystemModel
from .torus_fourier import TorusSeries, to_grid

# coefficients of b below this are treated as roundoff when their divisor vanishes
NOISE_COEFF = 1e-14
# relative level below which b coefficients are dropped outright; dividing FFT
# roundoff by a near-small divisor would otherwise pollute d_I v
ROUNDOFF_COEFF = 1e-15


def roundoff_floor(b: TorusSeries) -> float:
    return ROUNDOFF_COEFF * max(1.0, b.abs_sum())


@dataclass(frozen=True)
class CohomologySolution:
    action_I: np.ndarray
    omega: np.ndarray
    v: TorusSeries = field(repr=False)
    dI_v: tuple = field(repr=False)
    residual_sup: float
    min_divisor: float

    def v_support(self, floor: float = 0.0):
        return self.v.support(floor)


def divisors(model: SystemModel, action) -> np.ndarray:
    """``n . omega(I)`` on the coefficient block of the model band."""
    w = model.omega(action)
    n = model.b.indices()
    return (n @ w).reshape(model.b.coeffs.shape)


def solve_v(
    model: SystemModel,
    action,
    rhs: TorusSeries | None = None,
    refinement: int = 2,
) -> CohomologySolution:
    """Divide ``b_n`` by ``i n . omega(I)``.

    ``rhs`` replaces ``b`` (for truncation studies); the residual reported is
    always measured against the model's own ``b``.
    """
    action = np.asarray(action, dtype=float).reshape(model.dim)
    b = model.b if rhs is None else rhs.with_band(model.band)
    w = model.omega(action)
    dw = model.d_omega(action)
    n = b.indices()
    d = (n @ w).reshape(b.coeffs.shape)
    nonzero = np.any(n != 0, axis=1).reshape(d.shape)
    small = nonzero & (np.abs(d) < RESONANCE_THRESHOLD)
    bc = b.coeffs
    bc = np.where(np.abs(bc) > roundoff_floor(b), bc, 0.0)
    scale = max(1.0, b.abs_sum())
    offending = small & (np.abs(bc) > NOISE_COEFF * scale)
    if offending.any():
        idx = np.argwhere(offending)[0]
        mode = tuple(int(k) - model.band for k in idx)
        raise SmallDivisorError(
            f"small divisor n={mode}: |n.omega| = {abs(d[tuple(idx)]):.3e} at I={action.tolist()}",
            action=tuple(action.tolist()),
            mode=mode,
            value=float(abs(d[tuple(idx)])),
        )
    safe = np.where(nonzero & ~small, d, 1.0)
    vhat = np.where(nonzero & ~small, bc / (1j * safe), 0.0)
    # d/dI_j of b_n / (i n.omega) = -b_n (D omega^T n)_j / (i (n.omega)^2)
    grad_div = (n @ dw).reshape(d.shape + (model.dim,))
    factor = np.where(nonzero & ~small, -bc / (1j * safe**2), 0.0)
    dI = tuple(TorusSeries(factor * grad_div[..., j]) for j in range(model.dim))
    v = TorusSeries(vhat)
    mins = np.abs(d[nonzero]).min() if nonzero.any() else np.inf
    draft = CohomologySolution(action, w, v, dI, 0.0, float(mins))
    return CohomologySolution(action, w, v, dI, residual(draft, model, refinement), float(mins))


def residual(sol: CohomologySolution, model: SystemModel, refinement: int = 2) -> float:
    """``sup |omega . grad v - b|`` on a grid refined ``refinement`` times."""
    if refinement < 1:
        raise ValueError("refinement must be >= 1")
    K = max(sol.v.band, model.b.band)
    v = sol.v.with_band(K)
    n = v.indices()
    lhs = (1j * (n @ sol.omega)).reshape(v.coeffs.shape) * v.coeffs
    diff = TorusSeries(lhs - model.b.with_band(K).coeffs)
    return float(np.max(np.abs(to_grid(diff, refinement * (2 * K + 1)))))


@dataclass(frozen=True)
class UniquenessReport:
    unique: bool
    kernel_modes: tuple = ()

    def __bool__(self):
        return self.unique


def uniqueness_check(model: SystemModel, action, trials: int = 10, seed: int = 0) -> UniquenessReport:
    """Project random zero-mean series onto ``ker(omega . grad)`` and see what survives."""
    rng = np.random.default_rng(seed)
    d = divisors(model, action)
    n = model.b.indices()
    nonzero = np.any(n != 0, axis=1).reshape(d.shape)
    kernel = nonzero & (np.abs(d) < RESONANCE_THRESHOLD)
    survivors = set()
    for _ in range(trials):
        w = rng.normal(size=d.shape) + 1j * rng.normal(size=d.shape)
        w[~nonzero] = 0.0
        projected = np.where(kernel, w, 0.0)
        for idx in np.argwhere(np.abs(projected) > 0):
            survivors.add(tuple(int(k) - model.band for k in idx))
    return UniquenessReport(not survivors, tuple(sorted(survivors, key=lambda m: (np.linalg.norm(m), m))))
