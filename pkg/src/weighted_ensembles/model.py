"""Weighted integrable systems: the triple (m, H, Omega) and its derived fields.

The angular speed is ``a = m^(-1/N)``, the invariant density ``rho = m^(1/N)``,
``a_bar = (2 pi)^N / int rho`` and ``b = a_bar / a - 1``.  Fractional powers
are taken pointwise on the ``(2K+1)^N`` grid and transformed back at band K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegeneracyError,
    DimensionError,
    DomainError,
    PositivityError,
    ResonanceError,
)
from .torus_fourier import TorusSeries, from_grid, grid_points, mode_indices, to_grid

RESONANCE_THRESHOLD = 1e-12


@dataclass(frozen=True)
class Box:
    """Axis-aligned action domain ``prod_k [lower_k, upper_k]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.lower))
        hi = tuple(float(x) for x in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise DimensionError("box bounds have different lengths")
        for k, (a, b) in enumerate(zip(lo, hi)):
            if not a < b:
                raise DomainError(f"empty action box on axis {k}: [{a}, {b}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    def contains(self, actions, slack: float = 1e-12) -> np.ndarray:
        x = np.asarray(actions, dtype=float)
        return np.all((x >= np.asarray(self.lower) - slack) & (x <= np.asarray(self.upper) + slack), axis=-1)

    def grid(self, n: int) -> np.ndarray:
        """``n`` points per axis including both faces, shape (n**N, N)."""
        axes = [np.linspace(a, b, n) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return np.asarray(self.lower) + rng.random((count, self.dim)) * self.widths


class Polynomial:
    """Multivariate polynomial ``sum_k c_k prod_j I_j^{p_kj}`` with exact derivatives."""

    def __init__(self, terms):
        items = terms.items() if isinstance(terms, dict) else terms
        powers, coeffs = [], []
        for p, c in items:
            powers.append(tuple(int(e) for e in np.atleast_1d(p)))
            coeffs.append(float(c))
        if not powers:
            raise ValueError("polynomial needs at least one term")
        dims = {len(p) for p in powers}
        if len(dims) != 1:
            raise DimensionError("all monomials must have the same number of variables")
        self.powers = np.array(powers, dtype=int)
        self.coeffs = np.array(coeffs, dtype=float)
        if np.any(self.powers < 0):
            raise ValueError("negative exponents are not polynomial")
        self.dim = dims.pop()

    @classmethod
    def kinetic(cls, dim: int) -> Polynomial:
        """``|I|^2 / 2``."""
        return cls({tuple(2 * int(j == k) for j in range(dim)): 0.5 for k in range(dim)})

    def terms(self) -> list:
        return [[p.tolist(), float(c)] for p, c in zip(self.powers, self.coeffs)]

    @staticmethod
    def _monomials(x, powers):
        # x: (S, N), powers: (T, N) -> (S, T); 0**0 == 1 as required
        return np.prod(x[:, None, :] ** powers[None, :, :], axis=-1)

    def value(self, actions) -> np.ndarray:
        x = np.atleast_2d(np.asarray(actions, dtype=float))
        return self._monomials(x, self.powers) @ self.coeffs

    def gradient(self, actions) -> np.ndarray:
        x = np.atleast_2d(np.asarray(actions, dtype=float))
        out = np.zeros(x.shape)
        for j in range(self.dim):
            p = self.powers.copy()
            c = self.coeffs * p[:, j]
            p[:, j] = np.maximum(p[:, j] - 1, 0)
            out[:, j] = self._monomials(x, p) @ c
        return out

    def hessian(self, actions) -> np.ndarray:
        x = np.atleast_2d(np.asarray(actions, dtype=float))
        out = np.zeros(x.shape + (self.dim,))
        for i in range(self.dim):
            for j in range(i, self.dim):
                p = self.powers.copy()
                c = self.coeffs * p[:, i]
                p[:, i] = np.maximum(p[:, i] - 1, 0)
                c = c * p[:, j]
                p[:, j] = np.maximum(p[:, j] - 1, 0)
                out[:, i, j] = out[:, j, i] = self._monomials(x, p) @ c
        return out


@dataclass(frozen=True)
class SystemModel:
    dim: int
    box: Box
    hamiltonian: Polynomial = field(repr=False)
    weight: TorusSeries = field(repr=False)
    a: TorusSeries = field(repr=False)
    rho: TorusSeries = field(repr=False)
    a_bar: float
    b: TorusSeries = field(repr=False)
    name: str = "custom"

    @property
    def band(self) -> int:
        return self.weight.band

    def _actions(self, actions) -> tuple[np.ndarray, bool]:
        x = np.asarray(actions, dtype=float)
        single = x.ndim <= 1
        x = np.atleast_2d(x.reshape(-1, self.dim) if single else x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"action must have {self.dim} components")
        if not np.all(self.box.contains(x)):
            bad = x[~self.box.contains(x)][0]
            raise DomainError(f"action {bad.tolist()} lies outside the closed box {self.box}")
        return x, single

    def omega(self, actions) -> np.ndarray:
        """Frequency map ``grad H``; shape (N,) for one action, (S, N) for a batch."""
        x, single = self._actions(actions)
        w = self.hamiltonian.gradient(x)
        return w[0] if single else w

    def d_omega(self, actions) -> np.ndarray:
        """Hessian of H (the Jacobian of omega); symmetric."""
        x, single = self._actions(actions)
        h = self.hamiltonian.hessian(x)
        return h[0] if single else h

    def speed(self, theta) -> np.ndarray:
        """Angular speed factor ``a(theta)`` from its band-limited series."""
        return np.real(self.a(theta))


def _weight_block(weight, dim: int, band: int) -> np.ndarray:
    side = 2 * band + 1
    if isinstance(weight, TorusSeries):
        if weight.dim != dim:
            raise DimensionError("weight series dimension does not match the model")
        if weight.band > band:
            raise ValueError(f"weight has band {weight.band} above model band {band}")
        return np.real(to_grid(weight, side))
    if callable(weight):
        pts = grid_points(dim, side)
        return np.asarray(weight(pts), dtype=float).reshape((side,) * dim)
    arr = np.asarray(weight, dtype=float)
    if arr.size != side**dim:
        raise ValueError(f"weight samples must number (2K+1)^N = {side**dim}, got {arr.size}")
    return arr.reshape((side,) * dim)


def build_model(
    box: Box,
    hamiltonian: Polynomial,
    weight,
    band: int = 16,
    name: str = "custom",
) -> SystemModel:
    """Assemble a :class:`SystemModel`.

    ``weight`` may be a :class:`TorusSeries`, a callable ``m(theta)`` taking an
    (S, N) array, or raw samples on the ``(2K+1)^N`` grid.
    """
    dim = box.dim
    if hamiltonian.dim != dim:
        raise DimensionError("Hamiltonian and box dimensions differ")
    block = _weight_block(weight, dim, band)
    m_series = weight if isinstance(weight, TorusSeries) else from_grid(block)
    m_series = m_series.with_band(band)
    # positivity is audited on a 2x refined grid as well as the nominal one
    fine = np.real(to_grid(m_series, 2 * (2 * band + 1)))
    m_min = min(float(block.min()), float(fine.min()))
    if m_min <= 0:
        raise PositivityError(f"weight is not positive on the audit grid (min {m_min:.3e})")
    rho_block = block ** (1.0 / dim)
    rho = from_grid(rho_block)
    a = from_grid(block ** (-1.0 / dim))
    a_bar = 1.0 / rho.mean.real
    b_coeffs = from_grid(a_bar * rho_block - 1.0).coeffs.copy()
    b_coeffs[(band,) * dim] = 0.0
    return SystemModel(
        dim=dim,
        box=box,
        hamiltonian=hamiltonian,
        weight=m_series,
        a=a,
        rho=rho,
        a_bar=float(a_bar),
        b=TorusSeries(b_coeffs, real=True),
        name=name,
    )


@dataclass(frozen=True)
class ResonanceAudit:
    alpha_eff: float
    tau: float
    lambda_eff: float
    K_audit: int
    grid_points: int
    worst_action: tuple
    worst_mode: tuple
    modes: str = "all"

    @property
    def passed(self) -> bool:
        return self.alpha_eff > RESONANCE_THRESHOLD and self.lambda_eff > RESONANCE_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "alpha_eff": self.alpha_eff,
            "tau": self.tau,
            "lambda_eff": self.lambda_eff,
            "K_audit": self.K_audit,
            "grid_points": self.grid_points,
            "worst_action": list(self.worst_action),
            "worst_mode": list(self.worst_mode),
            "modes": self.modes,
            "passed": self.passed,
        }


def half_modes(dim: int, band: int) -> np.ndarray:
    """One representative of each ``+-n`` pair, first nonzero entry positive,
    sorted by Euclidean norm so primitive resonances come first."""
    n = mode_indices(dim, band)
    first = np.array([row[np.flatnonzero(row)[0]] if row.any() else 0 for row in n])
    n = n[first > 0]
    order = np.argsort(np.linalg.norm(n, axis=1), kind="stable")
    return n[order]


def support_modes(model: SystemModel, band: int | None = None, floor: float = 1e-14) -> np.ndarray:
    """Half-plane modes where ``b`` has a coefficient above ``floor``."""
    band = model.band if band is None else band
    modes = half_modes(model.dim, band)
    keep = [abs(model.b[tuple(n)]) > floor for n in modes]
    return modes[np.array(keep, dtype=bool)] if len(modes) else modes


def resonance_audit(
    model: SystemModel,
    K: int,
    grid_n: int,
    tau: float,
    modes: str = "all",
    raise_on_failure: bool = True,
) -> ResonanceAudit:
    """Effective Diophantine and twist constants on a finite band and action grid.

    ``alpha_eff = min |n . omega(I)| |n|^tau`` over grid actions and
    ``0 < |n|_inf <= K`` (Euclidean ``|n|``); ``lambda_eff`` is the smallest
    singular value of ``D omega`` on the grid.  ``modes="support"`` restricts
    the minimum to modes carried by ``b``, i.e. the divisors the solver uses.
    """
    if K < 1 or grid_n < 2:
        raise ValueError("need K >= 1 and grid_n >= 2")
    if tau < model.dim - 1:
        raise ValueError(f"tau must be >= N-1 = {model.dim - 1}")
    actions = model.box.grid(grid_n)
    n = half_modes(model.dim, K) if modes == "all" else support_modes(model, K)
    w = model.omega(actions)
    if len(n):
        div = np.abs(w @ n.T) * np.linalg.norm(n, axis=1) ** tau
        flat = int(np.argmin(div))
        i, p = np.unravel_index(flat, div.shape)
        alpha = float(div[i, p])
        worst_I, worst_n = tuple(actions[i].tolist()), tuple(int(k) for k in n[p])
    else:
        alpha, worst_I, worst_n = float("inf"), tuple(actions[0].tolist()), ()
    sv = np.linalg.svd(model.d_omega(actions), compute_uv=False)
    lam = float(sv.min())
    report = ResonanceAudit(alpha, float(tau), lam, int(K), int(len(actions)), worst_I, worst_n, modes)
    if raise_on_failure:
        if alpha <= RESONANCE_THRESHOLD:
            raise ResonanceError(
                f"resonance n={worst_n} at I={worst_I}: |n.omega| |n|^tau = {alpha:.3e}",
                action=worst_I,
                mode=worst_n,
                value=alpha,
            )
        if lam <= RESONANCE_THRESHOLD:
            raise DegeneracyError(f"D omega is singular on the action grid (sigma_min = {lam:.3e})")
    return report


# reference systems ---------------------------------------------------------


def unweighted(lower, upper, band: int = 16, hamiltonian: Polynomial | None = None) -> SystemModel:
    box = Box(tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper)))
    ham = hamiltonian or Polynomial.kinetic(box.dim)
    return build_model(box, ham, TorusSeries.constant(box.dim, band, 1.0), band, name="unweighted")


def sys_a(band: int = 16) -> SystemModel:
    """N=1, Omega=[1,2], H=I^2/2, m = 1 + 0.5 cos(theta)."""
    m = TorusSeries.from_dict(1, 1, {0: 1.0, 1: 0.25, -1: 0.25}, real=True)
    return build_model(Box((1.0,), (2.0,)), Polynomial.kinetic(1), m.with_band(band), band, name="sys-a")


def sys_b_rho() -> TorusSeries:
    """1 + 0.3 cos(theta_1) + 0.2 sin(theta_1 + theta_2)."""
    return TorusSeries.from_dict(
        2, 1, {(0, 0): 1.0, (1, 0): 0.15, (-1, 0): 0.15, (1, 1): -0.1j, (-1, -1): 0.1j}, real=True
    )


def sys_b(band: int = 16) -> SystemModel:
    """N=2, Omega=[1,1.2]x[1.55,1.7], H=|I|^2/2, m = rho^2 with rho as in :func:`sys_b_rho`."""
    rho = sys_b_rho()
    m = from_grid(np.real(to_grid(rho, 2 * band + 1)) ** 2)
    return build_model(Box((1.0, 1.55), (1.2, 1.70)), Polynomial.kinetic(2), m, band, name="sys-b")


def sys_c_exponent(seed: int = 42, inner_band: int = 4, m_min: float = 0.3) -> TorusSeries:
    """Random real band-4 series ``s`` scaled so that ``min exp(s) = m_min``."""
    rng = np.random.default_rng(seed)
    terms = {}
    for n in mode_indices(2, inner_band):
        key, partner = tuple(int(k) for k in n), tuple(int(-k) for k in n)
        if key in terms or not any(key):
            continue
        z = complex(rng.normal(), rng.normal()) / (1.0 + abs(key[0]) + abs(key[1])) ** 2
        terms[key], terms[partner] = z, z.conjugate()
    s = TorusSeries.from_dict(2, inner_band, terms, real=True)
    smin = float(np.real(to_grid(s, 257)).min())
    return (np.log(m_min) / smin) * s


def sys_c(band: int = 32, seed: int = 42) -> SystemModel:
    """N=2, same box and H as SYS-B, ``m = exp(s)`` for a seeded random band-4 ``s``."""
    s = sys_c_exponent(seed)

    def weight(theta):
        return np.exp(np.real(s(theta)))

    return build_model(Box((1.0, 1.55), (1.2, 1.70)), Polynomial.kinetic(2), weight, band, name="sys-c")


REFERENCE_SYSTEMS = {"sys-a": sys_a, "sys-b": sys_b, "sys-c": sys_c}
