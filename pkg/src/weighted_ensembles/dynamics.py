"""Angular flow ``theta' = a(theta) omega(I)``, ``I' = 0``, evaluated two independent ways.

``integrate_direct`` runs an adaptive embedded Runge-Kutta pair (scipy's
DOP853, order 8 with embedded 5/3 error estimators) on the original vector
field.  ``flow_conjugated`` uses the linearizing conjugacy and costs the same
for every ``t``.  Angles are carried as lifts in R^N throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .conjugacy import Conjugacy, ConjugacyField, torus_distance
from .errors import StiffnessError
from .model import SystemModel
from .torus_fourier import gradient


@dataclass(frozen=True)
class FlowState:
    action_I: np.ndarray
    theta: np.ndarray
    time: float


def _batch(model: SystemModel, actions, theta0):
    theta0 = np.asarray(theta0, dtype=float)
    single = theta0.ndim <= 1 and theta0.size == model.dim
    theta0 = theta0.reshape(-1, model.dim)
    actions = np.broadcast_to(np.asarray(actions, dtype=float).reshape(-1, model.dim), theta0.shape)
    return actions, theta0, single


def integrate_direct(model: SystemModel, action, theta0, t_end: float, tol: float = 1e-10) -> np.ndarray:
    """Lift of ``theta(t_end)``; ``action``/``theta0`` may be batches of shape (S, N).

    Negative ``t_end`` integrates backwards in time.
    """
    if not 1e-13 <= tol <= 1e-6:
        raise ValueError("tol must lie in [1e-13, 1e-6]")
    actions, theta0, single = _batch(model, action, theta0)
    if t_end == 0:
        return theta0[0].copy() if single else theta0.copy()
    w = model.omega(actions)
    shape = theta0.shape

    def rhs(_t, y):
        theta = y.reshape(shape)
        return (model.speed(theta)[:, None] * w).ravel()

    # lifts grow linearly in t, so the relative part must not dominate the error target
    rtol = max(1e-3 * tol, 1e-13)
    sol = solve_ivp(rhs, (0.0, float(t_end)), theta0.ravel(), method="DOP853", rtol=rtol, atol=tol)
    if not sol.success:
        raise StiffnessError(f"integration stopped at t={sol.t[-1]:.6g}: {sol.message}")
    out = sol.y[:, -1].reshape(shape)
    return out[0] if single else out


def trajectory_direct(model: SystemModel, action, theta0, t_grid, tol: float = 1e-10) -> np.ndarray:
    """Direct lifts at every time in ascending ``t_grid`` (segment by segment, no dense output)."""
    actions, theta, single = _batch(model, action, theta0)
    out, t_prev = [], 0.0
    for t in np.asarray(t_grid, dtype=float):
        if t != t_prev:
            theta = integrate_direct(model, actions, theta, t - t_prev, tol)
            t_prev = t
        out.append(theta.copy())
    out = np.stack(out)
    return out[:, 0] if single else out


def flow_conjugated(conj: Conjugacy | ConjugacyField, theta0, t: float, action=None) -> np.ndarray:
    """``Psi^-1(Psi(theta0) + a_bar omega(I) t)`` as a lift.

    With a :class:`ConjugacyField` the per-sample ``action`` array is required.
    """
    if isinstance(conj, ConjugacyField):
        return conj.flow(action, theta0, t)
    phi = conj.psi(theta0, lift=True) + conj.a_bar * conj.omega_I * t
    return conj.psi_inverse(phi, lift=True)


def linearity_defect(model: SystemModel, conj, theta0, t_grid, tol: float = 1e-10, action=None) -> float:
    """Max torus distance between the two flow evaluators over ``t_grid``."""
    if isinstance(conj, Conjugacy):
        action = conj.action_I
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    direct = trajectory_direct(model, action, theta0, t_grid, tol)
    worst = 0.0
    for t, theta_d in zip(t_grid, direct):
        theta_c = flow_conjugated(conj, theta0, t, action)
        worst = max(worst, float(np.max(torus_distance(theta_d, theta_c))))
    return worst


def divergence(model: SystemModel, action, theta) -> np.ndarray:
    """Lebesgue divergence ``omega(I) . grad a(theta)`` of the phase-space field."""
    return np.real(gradient(model.a, theta)) @ model.omega(action)


def state_at(model: SystemModel, conj: Conjugacy, theta0, t: float) -> FlowState:
    return FlowState(np.array(conj.action_I), flow_conjugated(conj, theta0, t), float(t))
