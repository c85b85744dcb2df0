"""The angular conjugacy ``Psi_I(theta) = theta + omega(I) v_I(theta)``.

Two entry points share one implementation:

* :class:`Conjugacy` is tied to a single action and built from a
  :class:`~weighted_ensembles.cohomology.CohomologySolution`.
* :class:`ConjugacyField` evaluates the whole family in batch, each point
  carrying its own action.  Ensembles use this one.

Angles handed in may be lifts; ``psi`` commutes with ``2 pi`` shifts so both
forward and inverse maps are computed on the universal cover.
"""

from __future__ import annotations

import numpy as np

from .cohomology import CohomologySolution, roundoff_floor, solve_v
from .errors import DiffeomorphismError, InversionError, SmallDivisorError
from .model import RESONANCE_THRESHOLD, SystemModel
from .torus_fourier import TWO_PI, evaluate, gradient, grid_points

INVERSION_TOL = 1e-12
MAX_NEWTON = 50
DAMPING = 0.5


def torus_distance(x, y) -> np.ndarray:
    """Max-norm distance on T^N between (batches of) angle vectors."""
    d = np.mod(np.asarray(x) - np.asarray(y) + np.pi, TWO_PI) - np.pi
    return np.max(np.abs(np.atleast_1d(d)), axis=-1)


def _sparse_v(modes, coeffs, theta):
    """v and grad v for real sparse series; ``coeffs`` is (P,) or per-point (S, P)."""
    e = np.exp(1j * (np.mod(theta, TWO_PI) @ modes.T))
    terms = coeffs * e
    v = np.real(terms.sum(axis=-1))
    grad = np.real(1j * terms @ modes)
    return v, grad


def newton_inverse(phi, omega, vgrad, tol=INVERSION_TOL, max_iter=MAX_NEWTON, damping=DAMPING):
    """Solve ``theta + omega v(theta) = phi`` on the lift by damped Newton.

    ``vgrad(theta, idx)`` returns ``v`` and ``grad v`` at the points ``theta``
    belonging to batch rows ``idx``.  ``omega`` has shape (S, N).  The phase
    is reduced to [0, 2 pi) before iterating and the integer shift restored at
    the end, so large lifts lose no precision.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    shift = TWO_PI * np.floor(phi / TWO_PI)
    target = phi - shift
    theta = target.copy()
    rows = np.arange(len(theta))
    v, g = vgrad(theta, rows)
    resid = target - theta - omega * v[:, None]
    err = np.max(np.abs(resid), axis=1)
    for _ in range(max_iter):
        idx = np.flatnonzero(err > tol)
        if idx.size == 0:
            return theta + shift
        w, gi = omega[idx], g[idx]
        det = 1.0 + np.sum(w * gi, axis=1)
        # (Id + w g^T)^{-1} r by the rank-one update formula
        step = resid[idx] - w * (np.sum(gi * resid[idx], axis=1) / det)[:, None]
        lam = np.ones(idx.size)
        todo = np.arange(idx.size)
        for halving in range(30):
            sel = idx[todo]
            trial = theta[sel] + lam[todo, None] * step[todo]
            tv, tg = vgrad(trial, sel)
            tr = target[sel] - trial - omega[sel] * tv[:, None]
            te = np.max(np.abs(tr), axis=1)
            ok = (te <= err[sel]) | (te <= tol) | (halving == 29)
            acc = sel[ok]
            theta[acc], v[acc], g[acc], resid[acc], err[acc] = trial[ok], tv[ok], tg[ok], tr[ok], te[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
            lam[todo] *= damping
    if np.all(err <= tol):
        return theta + shift
    raise InversionError(
        f"Newton inversion did not converge in {max_iter} iterations (residual {err.max():.3e})",
        residual=float(err.max()),
    )


def _effective_band(series, rel: float = 1e-15) -> int:
    mags = np.abs(series.coeffs)
    keep = np.argwhere(mags > rel * max(1.0, mags.sum()))
    if len(keep) == 0:
        return 1
    return max(1, int(np.abs(keep - series.band).max()))


class Conjugacy:
    """Per-action conjugacy with cached ``omega(I)`` and ``v_I``."""

    def __init__(self, model: SystemModel, action=None, solution: CohomologySolution | None = None,
                 certify: bool = True):
        if solution is None:
            solution = solve_v(model, action)
        self.model = model
        self.solution = solution
        self.action_I = solution.action_I
        self.omega_I = solution.omega
        self.v = solution.v
        self.a_bar = model.a_bar
        # evaluate on the smallest band that carries v; dropped tail is below roundoff
        self._v_eval = self.v.with_band(_effective_band(self.v))
        if certify:
            theta = grid_points(model.dim, 2 * (2 * model.band + 1))
            det = 1.0 + self._grad(theta) @ self.omega_I
            if det.min() <= 0:
                raise DiffeomorphismError(f"det D Psi reaches {det.min():.3e} <= 0 at I={self.action_I}")

    def _points(self, theta):
        x = np.asarray(theta, dtype=float)
        if self.model.dim == 1:
            single = x.ndim == 0 or x.shape == (1,)
        else:
            single = x.ndim == 1
        return x.reshape(-1, self.model.dim), single

    def _vg(self, theta):
        return np.real(evaluate(self._v_eval, theta)), np.real(gradient(self._v_eval, theta))

    def _grad(self, theta):
        return self._vg(theta)[1]

    def v_values(self, theta) -> np.ndarray:
        pts, single = self._points(theta)
        v = self._vg(pts)[0]
        return v[0] if single else v

    def psi(self, theta, lift: bool = False) -> np.ndarray:
        pts, single = self._points(theta)
        out = pts + self.omega_I * self._vg(pts)[0][:, None]
        out = out if lift else np.mod(out, TWO_PI)
        return out[0] if single else out

    def jacobian_det(self, theta) -> np.ndarray | float:
        pts, single = self._points(theta)
        det = 1.0 + self._grad(pts) @ self.omega_I
        if det.min() <= 0:
            raise DiffeomorphismError(f"det D Psi = {det.min():.3e} <= 0")
        return float(det[0]) if single else det

    def jacobian(self, theta) -> np.ndarray:
        """Full matrix ``Id + omega (x) grad v``."""
        pts, single = self._points(theta)
        g = self._grad(pts)
        jac = np.eye(self.model.dim)[None] + self.omega_I[None, :, None] * g[:, None, :]
        return jac[0] if single else jac

    def psi_inverse(self, phi, tol: float = INVERSION_TOL, lift: bool = False) -> np.ndarray:
        pts, single = self._points(phi)
        omega = np.broadcast_to(self.omega_I, pts.shape)

        def vgrad(theta, _rows):
            return self._vg(theta)

        theta = newton_inverse(pts, omega, vgrad, tol)
        theta = theta if lift else np.mod(theta, TWO_PI)
        return theta[0] if single else theta

    def d_I_v(self, theta) -> np.ndarray:
        pts, single = self._points(theta)
        out = np.stack([np.real(evaluate(s, pts)) for s in self.solution.dI_v], axis=-1)
        return out[0] if single else out

    def d_I_psi(self, theta) -> np.ndarray:
        """``D omega(I) v_I(theta) + omega(I) (x) d_I v_I(theta)``; entry [i, j] is dPsi_i/dI_j."""
        pts, single = self._points(theta)
        v = self._vg(pts)[0]
        dv = self.d_I_v(pts)
        dw = self.model.d_omega(self.action_I)
        out = dw[None] * v[:, None, None] + self.omega_I[None, :, None] * dv[:, None, :]
        return out[0] if single else out

    def degree_check(self, refinement: int = 2) -> float:
        theta = grid_points(self.model.dim, refinement * (2 * self.model.band + 1))
        return float(np.mean(self.jacobian_det(theta)))

    def pushforward_density(self, f0, phi) -> np.ndarray:
        """Density of ``(Psi_I)_# (f0 rho d theta)`` w.r.t. Lebesgue: ``f0(I, Psi^-1 phi) / a_bar``."""
        pts, single = self._points(phi)
        theta = self.psi_inverse(pts)
        actions = np.broadcast_to(self.action_I, theta.shape)
        vals = np.asarray(f0(actions, theta), dtype=float) / self.a_bar
        return vals[0] if single else vals


def _support_floor(model: SystemModel) -> float:
    return roundoff_floor(model.b)


class ConjugacyField:
    """The family ``I -> Psi_I`` evaluated pointwise on (action, angle) batches."""

    def __init__(self, model: SystemModel, chunk_budget: int = 2**22):
        self.model = model
        modes, coeffs = model.b.support(_support_floor(model))
        keep = np.any(modes != 0, axis=1)
        self.modes, self.bhat = modes[keep], coeffs[keep]
        self.a_bar = model.a_bar
        self.chunk = max(256, chunk_budget // max(1, len(self.modes)))

    def vhat(self, actions) -> tuple[np.ndarray, np.ndarray]:
        """Per-point coefficients of ``v_I`` on the support of ``b`` and ``omega(I)``."""
        w = self.model.omega(np.atleast_2d(actions))
        d = w @ self.modes.T
        small = np.abs(d) < RESONANCE_THRESHOLD
        if small.any():
            i, p = np.argwhere(small)[0]
            mode = tuple(int(k) for k in self.modes[p])
            raise SmallDivisorError(f"small divisor n={mode} at I={w[i]}", action=tuple(np.atleast_2d(actions)[i]),
                                    mode=mode, value=float(abs(d[i, p])))
        return self.bhat / (1j * d), w

    def _vg(self, coeffs, theta):
        if len(self.modes) == 0:
            return np.zeros(len(theta)), np.zeros_like(theta)
        return _sparse_v(self.modes, coeffs, theta)

    def _chunks(self, n):
        for start in range(0, n, self.chunk):
            yield slice(start, min(n, start + self.chunk))

    def psi(self, actions, theta, lift: bool = True) -> np.ndarray:
        actions, theta = np.atleast_2d(actions), np.atleast_2d(theta)
        actions = np.broadcast_to(actions, theta.shape)
        out = np.empty(theta.shape)
        for sl in self._chunks(len(theta)):
            c, w = self.vhat(actions[sl])
            out[sl] = theta[sl] + w * self._vg(c, theta[sl])[0][:, None]
        return out if lift else np.mod(out, TWO_PI)

    def jacobian_det(self, actions, theta) -> np.ndarray:
        actions, theta = np.atleast_2d(actions), np.atleast_2d(theta)
        actions = np.broadcast_to(actions, theta.shape)
        out = np.empty(len(theta))
        for sl in self._chunks(len(theta)):
            c, w = self.vhat(actions[sl])
            out[sl] = 1.0 + np.sum(w * self._vg(c, theta[sl])[1], axis=1)
        return out

    def psi_inverse(self, actions, phi, tol: float = INVERSION_TOL, lift: bool = True) -> np.ndarray:
        actions, phi = np.atleast_2d(actions), np.atleast_2d(phi)
        actions = np.broadcast_to(actions, phi.shape)
        out = np.empty(phi.shape)
        for sl in self._chunks(len(phi)):
            c, w = self.vhat(actions[sl])

            def vgrad(theta, rows, c=c):
                return self._vg(c[rows], theta)

            out[sl] = newton_inverse(phi[sl], w, vgrad, tol)
        return out if lift else np.mod(out, TWO_PI)

    def flow(self, actions, theta0, t: float, tol: float = INVERSION_TOL) -> np.ndarray:
        """Exact angular flow ``Psi^-1(Psi(theta0) + a_bar omega(I) t)`` as a lift."""
        actions, theta0 = np.atleast_2d(actions), np.atleast_2d(theta0)
        actions = np.broadcast_to(actions, theta0.shape)
        phi = self.psi(actions, theta0) + self.a_bar * self.model.omega(actions) * t
        return self.psi_inverse(actions, phi, tol)


def c_psi(model: SystemModel, actions, refinement: int = 1) -> float:
    """``sup ||d_I Psi_I(theta)||_2`` over the given actions and a theta grid."""
    theta = grid_points(model.dim, refinement * (2 * model.band + 1))
    best = 0.0
    for action in np.atleast_2d(actions):
        mats = Conjugacy(model, action, certify=False).d_I_psi(theta)
        best = max(best, float(np.linalg.norm(mats, ord=2, axis=(1, 2)).max()))
    return best


def conjugacy_audit(model: SystemModel, actions, n_roundtrip: int = 1000, seed: int = 0,
                    refinement: int = 2) -> dict:
    """Diffeomorphism, Jacobian-identity, degree and C_psi diagnostics over a set of actions."""
    rng = np.random.default_rng(seed)
    theta = grid_points(model.dim, refinement * (2 * model.band + 1))
    target = model.a_bar / np.real(model.a(theta))
    min_det, jac_err, deg_err, round_err = np.inf, 0.0, 0.0, []
    degree = 1.0
    for action in np.atleast_2d(actions):
        conj = Conjugacy(model, action)
        det = conj.jacobian_det(theta)
        min_det = min(min_det, float(det.min()))
        jac_err = max(jac_err, float(np.max(np.abs(det - target))))
        deg = float(det.mean())
        if abs(deg - 1.0) >= deg_err:
            deg_err, degree = abs(deg - 1.0), deg
        pts = rng.random((n_roundtrip, model.dim)) * TWO_PI
        back = conj.psi_inverse(conj.psi(pts))
        round_err.append(torus_distance(back, pts))
    return {
        "min_det": min_det,
        "max_jacobian_identity_error": jac_err,
        "degree": degree,
        "C_psi": c_psi(model, actions),
        "roundtrip_p99": float(np.percentile(np.concatenate(round_err), 99)),
    }
