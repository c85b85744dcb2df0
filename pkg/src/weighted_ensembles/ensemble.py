"""Statistical ensembles: initial densities, pushforwards, and observable averages.

Densities are taken with respect to the invariant measure ``rho(theta) dtheta dI``.
The production density is a product ``f0(I, theta) = g(I) h(theta) / Z``
normalized so that ``int f0 dmu* = 1``.

Two routes compute ``<G>_t``:

* Monte Carlo: rejection-sample ``f0 rho``, push samples through the
  conjugated flow, average ``G``.
* Mode quadrature: ``<G>_t = sum_n int_Omega Gt_n(I) M_n(I) exp(i t Phi_n(I)) dI``
  where ``M_n(I) = int exp(i n.Psi_I) f0 rho dtheta``, ``Phi_n = a_bar n.omega(I)``
  and ``Gt_n`` are the Fourier coefficients of the *conjugated* observable
  ``phi -> G(I, Psi_I^-1(phi))``, computed without inversion as
  ``(2 pi)^-N int G(I, theta) exp(-i n.Psi_I(theta)) a_bar rho(theta) dtheta``.
  The ``n = 0`` term is the weighted equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.fft import dctn

from .cohomology import solve_v
from .conjugacy import Conjugacy, ConjugacyField
from .errors import DegeneracyError, DensityError, EnvelopeError, QuadratureError
from .model import SystemModel
from .torus_fourier import TWO_PI, TorusSeries, exp_table, from_grid, grid_points, mode_indices, to_grid

# ---------------------------------------------------------------------------
# action profiles and densities


class ActionProfile:
    """Unnormalized action factor ``g(I)`` with its gradient."""

    kind = "custom"

    def __init__(self, box):
        self.box = box

    def value(self, actions) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def grad(self, actions) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def integral(self, nodes: int = 64) -> float:
        x, w = gauss_box(self.box, [nodes] * self.box.dim)
        return float(self.value(x) @ w)

    def axis_factors(self, axes):
        """Per-axis factors whose tensor product is ``g``; ``None`` if ``g`` does not factor."""
        return None


class FlatProfile(ActionProfile):
    kind = "flat"

    def value(self, actions):
        return np.ones(np.atleast_2d(actions).shape[0])

    def grad(self, actions):
        return np.zeros(np.atleast_2d(actions).shape)

    def axis_factors(self, axes):
        return [np.ones(len(x)) for x in axes]

    def integral(self, nodes: int = 64) -> float:
        return self.box.volume


class TiltedProfile(ActionProfile):
    """``prod_k (1 + slope * (I_k - lower_k) / width_k)``: boundary values differ by ``1 + slope``."""

    kind = "tilted"

    def __init__(self, box, slope: float = 1.0):
        super().__init__(box)
        if slope <= -1:
            raise DensityError("tilt slope must exceed -1 to keep g positive")
        self.slope = float(slope)

    def _factors(self, actions):
        x = (np.atleast_2d(actions) - np.asarray(self.box.lower)) / self.box.widths
        return 1.0 + self.slope * x

    def value(self, actions):
        return np.prod(self._factors(actions), axis=1)

    def grad(self, actions):
        f = self._factors(actions)
        total = np.prod(f, axis=1)[:, None]
        return total / f * (self.slope / self.box.widths)

    def axis_factors(self, axes):
        return [1.0 + self.slope * (x - lo) / w for x, lo, w in zip(axes, self.box.lower, self.box.widths)]


class BumpProfile(ActionProfile):
    """Smooth bump ``prod_k exp(-1/(1-x_k^2))`` supported in the interior (``x`` rescaled by ``margin``)."""

    kind = "bump"

    def __init__(self, box, margin: float = 0.9):
        super().__init__(box)
        self.margin = float(margin)

    def _x(self, actions):
        half = 0.5 * self.box.widths * self.margin
        return (np.atleast_2d(actions) - self.box.center) / half, half

    def value(self, actions):
        x, _ = self._x(actions)
        inside = np.abs(x) < 1
        safe = np.where(inside, x, 0.0)
        vals = np.where(inside, np.exp(-1.0 / (1.0 - safe**2)), 0.0)
        return np.prod(vals, axis=1)

    def grad(self, actions):
        x, half = self._x(actions)
        inside = np.abs(x) < 1
        safe = np.where(inside, x, 0.0)
        vals = np.where(inside, np.exp(-1.0 / (1.0 - safe**2)), 0.0)
        dlog = np.where(inside, -2.0 * safe / (1.0 - safe**2) ** 2, 0.0) / half
        total = np.prod(vals, axis=1)[:, None]
        return total * dlog

    def integral(self, nodes: int = 256) -> float:
        return super().integral(nodes)

    def axis_factors(self, axes):
        out = []
        for x, c, w in zip(axes, self.box.center, self.box.widths):
            y = (x - c) / (0.5 * w * self.margin)
            inside = np.abs(y) < 1
            safe = np.where(inside, y, 0.0)
            out.append(np.where(inside, np.exp(-1.0 / (1.0 - safe**2)), 0.0))
        return out


PROFILES = {"flat": FlatProfile, "tilted": TiltedProfile, "bump": BumpProfile}


class ProductDensity:
    """``f0(I, theta) = g(I) h(theta) / Z`` with ``int f0 rho dtheta dI = 1``.

    ``h`` is a real :class:`TorusSeries`, positive on the torus.
    """

    def __init__(self, model: SystemModel, profile: ActionProfile, h: TorusSeries):
        self.model = model
        self.profile = profile
        self.h = h
        test = np.real(h.to_grid(max(64, 4 * h.band + 1)))
        if test.min() <= 0:
            raise DensityError("angular factor h must be positive")
        # int h rho dtheta over T^N is (2 pi)^N times the zero mode of the product
        theta = grid_points(model.dim, 2 * max(h.band, model.band) + 1)
        self.h_rho_integral = TWO_PI**model.dim * float(np.mean(self.h_values(theta) * self._rho(theta)))
        self.Z = profile.integral() * self.h_rho_integral

    def _rho(self, theta):
        return np.real(self.model.rho(theta))

    def h_values(self, theta) -> np.ndarray:
        return np.real(self.h(theta))

    def g(self, actions) -> np.ndarray:
        return self.profile.value(actions) / self.Z

    def dg(self, actions) -> np.ndarray:
        return self.profile.grad(actions) / self.Z

    def __call__(self, actions, theta) -> np.ndarray:
        return self.g(actions) * self.h_values(theta)

    def d_I(self, actions, theta) -> np.ndarray:
        return self.dg(actions) * self.h_values(theta)[:, None]


def uniform_density(model: SystemModel) -> ProductDensity:
    """Constant ``f0`` w.r.t. ``mu*``: the invariant (stationary) ensemble."""
    return ProductDensity(model, FlatProfile(model.box), TorusSeries.constant(model.dim, 0, 1.0))


# ---------------------------------------------------------------------------
# observables


class Observable:
    """Bounded observable ``G(I, theta)`` evaluated on (S, N) batches.

    ``band`` records the Fourier band of ``G(I, .)`` when known (metadata only).
    """

    def __init__(self, func: Callable, band: int | None = None, name: str = "G",
                 theta_free: bool = False):
        self.func = func
        self.band = band
        self.name = name
        self.theta_free = theta_free

    def __call__(self, actions, theta) -> np.ndarray:
        return np.asarray(self.func(np.atleast_2d(actions), np.atleast_2d(theta)), dtype=float)

    def fourier(self, action, band: int | None = None) -> TorusSeries:
        """``G(I, .)`` sampled on the band grid and transformed."""
        band = band if band is not None else (self.band or 8)
        dim = np.atleast_1d(action).size
        theta = grid_points(dim, 2 * band + 1)
        vals = self(np.broadcast_to(action, theta.shape), theta)
        return from_grid(vals.reshape((2 * band + 1,) * dim))

    @classmethod
    def trig(cls, series: TorusSeries, action_factor: Callable | None = None, name: str = "trig"):
        """``G = action_factor(I) * Re(series(theta))`` (factor defaults to 1)."""

        def func(actions, theta):
            vals = np.real(series(theta))
            return vals if action_factor is None else action_factor(actions) * vals

        return cls(func, series.band, name)

    @classmethod
    def action_only(cls, func: Callable, name: str = "G(I)"):
        return cls(lambda a, t: func(a), 0, name, theta_free=True)


def cos_mode(dim: int, n, name: str | None = None) -> Observable:
    n = tuple(np.atleast_1d(n))
    band = max(abs(k) for k in n)
    s = TorusSeries.from_dict(dim, band, {n: 0.5}, real=True)
    return Observable.trig(s, name=name or f"cos{n}")


def sin_mode(dim: int, n, name: str | None = None) -> Observable:
    n = tuple(np.atleast_1d(n))
    band = max(abs(k) for k in n)
    s = TorusSeries.from_dict(dim, band, {n: -0.5j}, real=True)
    return Observable.trig(s, name=name or f"sin{n}")


def random_trig(dim: int, band: int, seed: int, decay: float = 2.0) -> TorusSeries:
    """Seeded real trigonometric polynomial with zero mean and ``|c_n| ~ (1+|n|_1)^-decay``."""
    rng = np.random.default_rng(seed)
    terms = {}
    for n in mode_indices(dim, band):
        key = tuple(int(k) for k in n)
        if key in terms or not any(key):
            continue
        z = complex(rng.normal(), rng.normal()) / (1.0 + sum(abs(k) for k in key)) ** decay
        terms[key], terms[tuple(-k for k in key)] = z, z.conjugate()
    return TorusSeries.from_dict(dim, band, terms, real=True)


# ---------------------------------------------------------------------------
# quadrature helpers


PANEL_NODES = 64
PANEL_PHASE = 50.0


@lru_cache(maxsize=256)
def _leggauss(n: int):
    return np.polynomial.legendre.leggauss(n)


def gauss_interval(lo: float, hi: float, nodes: int, phase_span: float = 0.0):
    """Gauss-Legendre rule on ``[lo, hi]`` with at least ``nodes`` points.

    When the integrand's phase moves by more than ``PANEL_PHASE`` radians the
    interval is split into equal panels of ``PANEL_NODES`` points each; this keeps
    node generation cheap at large ``t``.
    """
    panels = int(np.ceil(phase_span / PANEL_PHASE))
    if panels <= 1:
        x, w = _leggauss(int(nodes))
        return 0.5 * (hi - lo) * x + 0.5 * (hi + lo), 0.5 * (hi - lo) * w
    panels = max(panels, int(np.ceil(nodes / PANEL_NODES)))
    x, w = _leggauss(PANEL_NODES)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


def gauss_box(box, nodes) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes (S, N) and weights (S,) on an action box."""
    pts, wts = [], []
    for (lo, hi), n in zip(zip(box.lower, box.upper), nodes):
        x, w = gauss_interval(lo, hi, n)
        pts.append(x)
        wts.append(w)
    mesh = np.meshgrid(*pts, indexing="ij")
    wmesh = np.meshgrid(*wts, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), np.prod(np.stack([w.ravel() for w in wmesh]), axis=0)


def chebyshev_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * np.cos(np.pi * (2 * k + 1) / (2 * n))


def barycentric_matrix(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``L @ f(nodes) = p(x)`` for the interpolating polynomial ``p``."""
    n = len(nodes)
    k = np.arange(n)
    # weights for Chebyshev points of the first kind
    w = (-1.0) ** k * np.sin(np.pi * (2 * k + 1) / (2 * n))
    diff = x[:, None] - nodes[None, :]
    exact = diff == 0
    diff[exact] = 1.0
    terms = w / diff
    out = terms / terms.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    out[rows] = exact[rows].astype(float)
    return out


# ---------------------------------------------------------------------------
# ensemble specification


@dataclass
class EnsembleSpec:
    f0: ProductDensity
    G: Observable
    n_samples: int = 100_000
    quad_nodes: int = 65
    seed: int = 0
    mode_band: int = 12
    cheb_nodes: int = 16
    mode_floor: float = 1e-12

    def __post_init__(self):
        if self.quad_nodes < 3:
            raise ValueError("quad_nodes must be at least 3")


def _theta_rule(dim: int, nodes: int):
    theta = grid_points(dim, nodes)
    weight = TWO_PI**dim / len(theta)
    return theta, weight


def normalization(spec: EnsembleSpec, model: SystemModel, i_nodes: int = 48) -> float:
    """``int f0 dmu*`` by tensor quadrature (should be 1)."""
    x, wx = gauss_box(model.box, [i_nodes] * model.dim)
    theta, wt = _theta_rule(model.dim, spec.quad_nodes)
    rho = np.real(model.rho(theta))
    total = 0.0
    for xi, wi in zip(x, wx):
        total += wi * wt * float(np.sum(spec.f0(np.broadcast_to(xi, theta.shape), theta) * rho))
    return total


def marginal_W(spec: EnsembleSpec, model: SystemModel, actions) -> tuple[np.ndarray, np.ndarray]:
    """``W(I) = int f0 rho dtheta`` and ``W1(I) = int |d_I f0| rho dtheta`` (Euclidean norm)."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float).reshape(-1, model.dim))
    theta, wt = _theta_rule(model.dim, spec.quad_nodes)
    rho = np.real(model.rho(theta))
    W, W1 = np.empty(len(actions)), np.empty(len(actions))
    for i, a in enumerate(actions):
        batch = np.broadcast_to(a, theta.shape)
        f = spec.f0(batch, theta)
        if np.any(f < 0):
            raise DensityError(f"negative density value {f.min():.3e} at I={a.tolist()}")
        df = np.linalg.norm(spec.f0.d_I(batch, theta), axis=1)
        W[i] = wt * float(np.sum(f * rho))
        W1[i] = wt * float(np.sum(df * rho))
    return W, W1


# ---------------------------------------------------------------------------
# sampling


def _proposal_rng(seed: int, block: int) -> np.random.Generator:
    # counter-based stream: block b of proposals depends only on (seed, b)
    return np.random.Generator(np.random.Philox(key=[seed, block]))


def sample_initial(spec: EnsembleSpec, model: SystemModel, count: int, seed: int | None = None,
                   reference: str = "weighted", block_size: int = 65536,
                   envelope_grid: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Rejection samples ``(I, theta)`` from ``f0 rho`` (or ``f0`` alone with ``reference="lebesgue"``)."""
    seed = spec.seed if seed is None else seed
    dim = model.dim
    if count == 0:
        return np.empty((0, dim)), np.empty((0, dim))
    weighted = reference == "weighted"

    def target(actions, theta):
        f = spec.f0(actions, theta)
        return f * np.real(model.rho(theta)) if weighted else f

    # envelope from a grid maximum with a 1.2 safety factor
    ga = model.box.grid(envelope_grid)
    gt = grid_points(dim, max(4 * model.band + 1, 4 * spec.f0.h.band + 9, 33))
    env = 0.0
    for a in ga:
        env = max(env, float(target(np.broadcast_to(a, gt.shape), gt).max()))
    env *= 1.2
    lo, width = np.asarray(model.box.lower), model.box.widths
    out_I, out_t, have, block = [], [], 0, 0
    while have < count:
        rng = _proposal_rng(seed, block)
        block += 1
        u = rng.random((block_size, 2 * dim + 1))
        actions = lo + u[:, :dim] * width
        theta = TWO_PI * u[:, dim:2 * dim]
        vals = target(actions, theta)
        if np.any(vals > env):
            raise EnvelopeError(f"density {vals.max():.4g} exceeds rejection envelope {env:.4g}; refit")
        keep = u[:, -1] * env < vals
        out_I.append(actions[keep])
        out_t.append(theta[keep])
        have += int(keep.sum())
    return np.concatenate(out_I)[:count], np.concatenate(out_t)[:count]


def sample_invariant(model: SystemModel, count: int, seed: int, reference: str = "weighted"):
    """Samples of normalized ``mu*`` (uniform actions, angles ~ rho), or uniform angles."""
    spec = EnsembleSpec(uniform_density(model), Observable(lambda a, t: np.zeros(len(a))))
    return sample_initial(spec, model, count, seed, reference=reference)


# ---------------------------------------------------------------------------
# mode data


def v_field(model: SystemModel, n, action) -> np.ndarray:
    """``V_n = D omega^T n / ||D omega^T n||^2 / a_bar``, so that ``V_n . grad Phi_n = 1``."""
    n = np.asarray(n, dtype=float)
    dw = model.d_omega(action)
    g = np.einsum("...ji,j->...i", dw, n)
    norm2 = np.sum(g * g, axis=-1, keepdims=True)
    if np.any(norm2 <= 1e-24):
        raise DegeneracyError(f"D omega^T n vanishes for n={n.tolist()}")
    return g / norm2 / model.a_bar


def phase(model: SystemModel, n, actions) -> np.ndarray:
    """``Phi_n(I) = a_bar n . omega(I)``."""
    return model.a_bar * (model.omega(actions) @ np.asarray(n, dtype=float))


@dataclass
class ModeTable:
    """Per-mode amplitudes on a Chebyshev action grid.

    ``amp[p]`` holds ``Gt_n(I) * M_n(I) / g(I)`` for half-plane mode ``modes[p]``
    on the tensor Chebyshev grid (the action profile ``g`` is multiplied back
    exactly at quadrature nodes, so nonsmooth profiles are not interpolated).
    ``zero`` holds the same quantity for ``n = 0``.
    """

    modes: np.ndarray
    amp: np.ndarray
    zero: np.ndarray
    cheb: list = field(repr=False)
    model: SystemModel = field(repr=False)
    spec: EnsembleSpec = field(repr=False)
    Gt: np.ndarray = field(repr=False, default=None)
    M: np.ndarray = field(repr=False, default=None)
    affine: tuple | None = field(repr=False, default=None)
    mass: np.ndarray = field(repr=False, default=None)
    tail: np.ndarray = field(repr=False, default=None)
    zero_mass: float = 0.0

    def __post_init__(self):
        if self.mass is None:
            x, w = gauss_box(self.model.box, [24] * self.model.dim)
            axes = [np.unique(x[:, k]) for k in range(self.model.dim)]
            self.mass = np.array([np.abs(self.tensor_amplitude(p, axes)) @ w for p in range(len(self.modes))])
            self.zero_mass = float(np.abs(self.tensor_amplitude(0, axes, values=self.zero)) @ w)
        if self.tail is None:
            self.tail = np.array([_cheb_tail(a.reshape([len(c) for c in self.cheb])) for a in self.amp])

    def g_mass(self) -> float:
        return self.spec.f0.profile.integral() / self.spec.f0.Z

    def band_tail(self) -> float:
        """Estimate of ``2 sum int |A_n| dI`` over modes outside the table band.

        Shell masses decay roughly geometrically; the ratio of the last two
        shells (capped at 0.9) extrapolates the remainder. The ratio drifts
        upward with the shell index, hence the extra factor 2.
        """
        shell = np.max(np.abs(self.modes), axis=1)
        band = int(shell.max()) if len(shell) else 0
        if band < 2:
            return 0.0
        last, prev = self.mass[shell == band].sum(), self.mass[shell == band - 1].sum()
        r = min(0.9, last / prev) if prev > 0 else 0.9
        return float(4.0 * last * r / (1.0 - r))

    def error_bound(self, keep) -> float:
        """Error estimate for ``sum_{n != 0}``: interpolation tails, dropped modes, band tail (t-independent)."""
        dropped = np.setdiff1d(np.arange(len(self.modes)), keep)
        return float(2.0 * self.mass[dropped].sum() + 4.0 * self.tail[keep].sum() * self.g_mass()
                     + self.band_tail())

    def amplitude(self, p: int, actions) -> np.ndarray:
        """Interpolated ``A_n`` at arbitrary actions (profile included)."""
        A = self._interp(self.amp[p], actions)
        return A * self.spec.f0.g(actions)

    def _interp(self, values, actions) -> np.ndarray:
        mats = [barycentric_matrix(nodes, actions[:, k]) for k, nodes in enumerate(self.cheb)]
        shape = [len(c) for c in self.cheb]
        block = values.reshape(shape)
        if self.model.dim == 1:
            return mats[0] @ block
        if self.model.dim == 2:
            return np.einsum("si,ij,sj->s", mats[0], block, mats[1])
        return np.einsum("si,ijk,sj,sk->s", mats[0], block, mats[1], mats[2])

    def tensor_amplitude(self, p: int, axes: list, values=None) -> np.ndarray:
        """``A_n`` on the tensor grid spanned by 1-d node arrays ``axes`` (profile included)."""
        vals = (self.amp[p] if values is None else values).reshape([len(c) for c in self.cheb])
        mats = [barycentric_matrix(nodes, ax) for nodes, ax in zip(self.cheb, axes)]
        out = vals
        for k, mat in enumerate(mats):
            out = np.moveaxis(np.tensordot(mat, out, axes=([1], [k])), 0, k)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        return out.ravel() * self.spec.f0.g(pts)


def _cheb_tail(block: np.ndarray) -> float:
    """Largest Chebyshev coefficient among the two highest degrees on any axis."""
    coef = dctn(block, type=2) / block.size
    n = block.shape[0]
    mask = np.zeros(block.shape, dtype=bool)
    for k in range(block.ndim):
        idx = [slice(None)] * block.ndim
        idx[k] = slice(n - 2, n)
        mask[tuple(idx)] = True
    return float(np.abs(coef[mask]).max()) * 2**block.ndim


def mode_table(spec: EnsembleSpec, model: SystemModel, band: int | None = None) -> ModeTable:
    """Compute ``Gt_n`` and ``M_n`` on Chebyshev actions for ``|n|_inf <= band``."""
    band = spec.mode_band if band is None else band
    dim = model.dim
    cheb = [chebyshev_nodes(lo, hi, spec.cheb_nodes) for lo, hi in zip(model.box.lower, model.box.upper)]
    mesh = np.meshgrid(*cheb, indexing="ij")
    actions = np.stack([m.ravel() for m in mesh], axis=-1)
    theta, wt = _theta_rule(dim, spec.quad_nodes)
    rho = np.real(model.rho(theta))
    h = spec.f0.h_values(theta)
    side = 2 * band + 1
    Gt = np.empty((len(actions),) + (side,) * dim, dtype=complex)
    M = np.empty_like(Gt)
    for i, a in enumerate(actions):
        batch = np.broadcast_to(a, theta.shape)
        psi = theta + model.omega(a) * _v_on_grid(model, a, spec.quad_nodes, theta)[:, None]
        G = spec.G(batch, theta)
        tables = [exp_table(psi[:, k], band, sign=-1) for k in range(dim)]
        wG = G * model.a_bar * rho / len(theta)
        wM = h * rho * wt
        Gt[i] = _tensor_dft(tables, wG, side)
        # M_n carries exp(+i n.Psi): conjugate the transform of a real weight
        M[i] = np.conj(_tensor_dft(tables, wM, side))
    n_all = mode_indices(dim, band)
    first = np.array([row[np.flatnonzero(row)[0]] if row.any() else 0 for row in n_all])
    half = np.flatnonzero(first > 0)
    flatGt, flatM = Gt.reshape(len(actions), -1), M.reshape(len(actions), -1)
    prod = flatGt * flatM
    center = np.flatnonzero(~np.any(n_all, axis=1))[0]
    return ModeTable(n_all[half], prod[:, half].T.copy(), prod[:, center].copy(), cheb, model, spec,
                     flatGt, flatM, affine_phase(model))


def mode_M(spec: EnsembleSpec, model: SystemModel, n, actions) -> np.ndarray:
    """``M_n(I) = int exp(i n . Psi_I(theta)) f0(I, theta) rho(theta) dtheta`` at arbitrary actions."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float).reshape(-1, model.dim))
    n = np.asarray(n, dtype=float)
    theta, wt = _theta_rule(model.dim, spec.quad_nodes)
    rho = np.real(model.rho(theta))
    out = np.empty(len(actions), dtype=complex)
    for i, a in enumerate(actions):
        psi = theta + model.omega(a) * _v_on_grid(model, a, spec.quad_nodes, theta)[:, None]
        f = spec.f0(np.broadcast_to(a, theta.shape), theta)
        out[i] = wt * np.sum(np.exp(1j * (psi @ n)) * f * rho)
    return out


def _v_on_grid(model: SystemModel, action, nodes: int, theta) -> np.ndarray:
    """``v_I`` on the uniform ``nodes``-point grid (inverse FFT when the grid resolves the band)."""
    v = solve_v(model, action, refinement=1).v
    if nodes >= 2 * v.band + 1:
        return np.real(to_grid(v, nodes)).ravel()
    return np.real(v(theta))


def _tensor_dft(tables, weights, side):
    """``sum_s weights[s] prod_k tables[k][s, n_k]`` as an (side,)*N block."""
    if len(tables) == 1:
        return weights @ tables[0]
    if len(tables) == 2:
        return (tables[0] * weights[:, None]).T @ tables[1]
    letters = "ijk"[: len(tables)]
    spec = "s," + ",".join("s" + c for c in letters) + "->" + letters
    return np.einsum(spec, weights, *tables, optimize=True)


def _phase_spans(model: SystemModel, n, t: float) -> np.ndarray:
    """Phase excursion ``R_k = t max|d Phi_n / d I_k| width_k`` per axis (max over a probe grid)."""
    probe = model.box.grid(5)
    grad = model.a_bar * np.abs(np.einsum("sij,i->sj", model.d_omega(probe), np.asarray(n, float)))
    return np.abs(t) * grad.max(axis=0) * model.box.widths


def _nodes_for(model: SystemModel, n, t: float, minimum: int = 10) -> list:
    """Gauss-Legendre count per axis: ``minimum + 2 ceil(R_k / pi)``."""
    return [int(minimum + 2 * np.ceil(r / np.pi)) for r in _phase_spans(model, n, t)]


def mode_integral(spec: EnsembleSpec, model: SystemModel, n, t: float, table: ModeTable | None = None,
                  refine: int = 1, max_nodes: int = 2**22) -> complex:
    """``I_n(t) = int_Omega A_n(I) exp(i t Phi_n(I)) dI`` by tensor Gauss-Legendre."""
    n = np.asarray(n, dtype=int)
    if not n.any():
        raise ValueError("mode_integral needs n != 0")
    table = table if table is not None else mode_table(spec, model, int(np.abs(n).max()))
    matches = np.flatnonzero(np.all(table.modes == n, axis=1))
    conj = False
    if matches.size == 0:
        matches = np.flatnonzero(np.all(table.modes == -n, axis=1))
        conj = True
    if matches.size == 0:
        raise ValueError(f"mode {n.tolist()} not in the table band")
    p = int(matches[0])
    nodes = [refine * k for k in _nodes_for(model, n, t)]
    if np.prod(nodes) > max_nodes:
        raise QuadratureError(f"oscillatory quadrature needs {nodes} nodes (limit {max_nodes})")
    val = _integrate_mode(table, p, table.modes[p], t, nodes, refine)
    return np.conj(val) if conj else val


def affine_phase(model: SystemModel):
    """``(D omega, omega(center))`` when ``omega`` is affine on the box (quadratic H), else ``None``."""
    probe = model.box.grid(3)
    dw = model.d_omega(probe)
    if np.max(np.abs(dw - dw[0])) > 1e-13 * max(1.0, np.abs(dw[0]).max()):
        return None
    return dw[0], model.omega(model.box.center)


def _integrate_mode(table: ModeTable, p: int, n, t: float, nodes, refine: int = 1) -> complex:
    model = table.model
    spans = _phase_spans(model, n, t) * refine
    axes, wts = [], []
    for (lo, hi), k, r in zip(zip(model.box.lower, model.box.upper), nodes, spans):
        x, w = gauss_interval(lo, hi, k, r)
        axes.append(x)
        wts.append(w)
    affine = table.affine
    factors = table.spec.f0.profile.axis_factors(axes)
    if affine is not None and factors is not None:
        # affine phase and product profile: the tensor integral factors axis by axis
        dw, w_center = affine
        n = np.asarray(n, dtype=float)
        slope = model.a_bar * (dw.T @ n)
        offset = model.a_bar * float(n @ w_center) - float(slope @ model.box.center)
        vecs = []
        for nodes_k, x, w, f, s in zip(table.cheb, axes, wts, factors, slope):
            vecs.append(barycentric_matrix(nodes_k, x).T @ (w * f * np.exp(1j * t * s * x)))
        out = table.amp[p].reshape([len(c) for c in table.cheb])
        for vec in vecs:
            out = np.tensordot(vec, out, axes=([0], [0]))
        return complex(out * np.exp(1j * t * offset) / table.spec.f0.Z)
    A = table.tensor_amplitude(p, axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    wmesh = np.meshgrid(*wts, indexing="ij")
    w = np.prod(np.stack([m.ravel() for m in wmesh]), axis=0)
    ph = phase(model, n, pts)
    return complex(np.sum(w * A * np.exp(1j * t * ph)))


@dataclass(frozen=True)
class Expectation:
    t: float
    mc: float
    stderr: float
    quad: float


@dataclass(frozen=True)
class Equilibrium:
    value: float
    modal: float

    @property
    def discrepancy(self) -> float:
        return abs(self.value - self.modal)


def relevant_modes(table: ModeTable, floor: float | None = None) -> np.ndarray:
    """Indices ``p`` whose L1 mass ``int |A_n| dI`` is not negligible against the largest one.

    Dropped modes cannot move ``<G>_t`` by more than twice their mass, which is
    reported through :meth:`ModeTable.error_bound`.
    """
    floor = table.spec.mode_floor if floor is None else floor
    if len(table.mass) == 0:
        return np.array([], dtype=int)
    scale = max(float(table.mass.max()), table.zero_mass, 1e-300)
    return np.flatnonzero(table.mass > floor * scale)


def quad_expectation(spec: EnsembleSpec, model: SystemModel, t: float, table: ModeTable | None = None,
                     refine: int = 1) -> tuple[float, float]:
    """(<G>_t, <G>_t - <G>_eq) from the mode expansion."""
    table = table if table is not None else mode_table(spec, model)
    eq = _integrate_zero(table)
    diff = 0.0
    for p in relevant_modes(table):
        n = table.modes[p]
        nodes = [refine * k for k in _nodes_for(model, n, t)]
        diff += 2.0 * _integrate_mode(table, p, n, t, nodes, refine).real
    return eq + diff, diff


def _integrate_zero(table: ModeTable, nodes: int = 48) -> float:
    model = table.model
    axes, wts = [], []
    for lo, hi in zip(model.box.lower, model.box.upper):
        x, w = gauss_interval(lo, hi, nodes)
        axes.append(x)
        wts.append(w)
    A = table.tensor_amplitude(0, axes, values=table.zero)
    wmesh = np.meshgrid(*wts, indexing="ij")
    w = np.prod(np.stack([m.ravel() for m in wmesh]), axis=0)
    return float(np.real(np.sum(w * A)))


def expect_mc(spec: EnsembleSpec, model: SystemModel, t: float, samples=None,
              field_: ConjugacyField | None = None) -> tuple[float, float]:
    """Monte Carlo mean of ``G(I, Phi_t(I, theta))`` and its standard error."""
    actions, theta = samples if samples is not None else sample_initial(spec, model, spec.n_samples)
    field_ = field_ if field_ is not None else ConjugacyField(model)
    moved = theta if t == 0 else field_.flow(actions, theta, t)
    vals = spec.G(actions, moved)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(len(vals)))


def expect_t(spec: EnsembleSpec, model: SystemModel, t: float, samples=None,
             table: ModeTable | None = None, field_: ConjugacyField | None = None) -> Expectation:
    """Both estimators of ``<G>_t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    mc, se = expect_mc(spec, model, t, samples, field_)
    quad, _ = quad_expectation(spec, model, t, table)
    return Expectation(float(t), mc, se, quad)


def expect_eq(spec: EnsembleSpec, model: SystemModel, i_nodes: int = 10) -> Equilibrium:
    """Weighted equilibrium average, computed two ways.

    ``value``: ``int (int G rho / int rho) W dI`` on the theta side.
    ``modal``: ``int Gt_0 M_0 dI`` with both factors taken on the phi side through
    ``Psi_I^-1`` on a uniform phi grid.
    """
    dim = model.dim
    x, wx = gauss_box(model.box, [i_nodes] * dim)
    theta, wt = _theta_rule(dim, spec.quad_nodes)
    rho = np.real(model.rho(theta))
    Z = wt * rho.sum()
    value = modal = 0.0
    for a, w in zip(x, wx):
        batch = np.broadcast_to(a, theta.shape)
        G = spec.G(batch, theta)
        W = wt * float(np.sum(spec.f0(batch, theta) * rho))
        value += w * W * wt * float(np.sum(G * rho)) / Z
        back = Conjugacy(model, a, certify=False).psi_inverse(theta, lift=True)
        G0 = float(np.mean(spec.G(batch, back)))
        M0 = wt * float(np.sum(spec.f0(batch, back))) / model.a_bar
        modal += w * G0 * M0
    return Equilibrium(float(value), float(modal))


# ---------------------------------------------------------------------------
# invariance audit


@dataclass(frozen=True)
class InvarianceEntry:
    name: str
    t: float
    mean_t: float
    mean_0: float
    stderr: float
    z: float
    flagged: bool


def invariance_audit(model: SystemModel, test_fns: dict, t_list, n_samples: int, tol_sigma: float = 3.0,
                     seed: int = 0, reference: str = "weighted") -> list:
    """Paired Monte Carlo comparison of ``int phi o Phi_t dmu`` against ``int phi dmu``.

    ``reference="lebesgue"`` samples angles uniformly instead of from ``rho``;
    that measure is not invariant and should be flagged.
    """
    actions, theta = sample_invariant(model, n_samples, seed, reference)
    field_ = ConjugacyField(model)
    out = []
    for t in t_list:
        moved = field_.flow(actions, theta, t)
        for name, fn in test_fns.items():
            before = np.asarray(fn(actions, theta), dtype=float)
            after = np.asarray(fn(actions, moved), dtype=float)
            d = after - before
            se = float(np.std(d, ddof=1) / np.sqrt(len(d)))
            mean_d = float(d.mean())
            if se == 0.0:
                z = 0.0 if mean_d == 0.0 else np.inf
            else:
                z = abs(mean_d) / se
            out.append(InvarianceEntry(name, float(t), float(after.mean()), float(before.mean()), se, float(z),
                                       bool(z > tol_sigma)))
    return out
