"""Truncated Fourier series on the flat torus T^N = (R / 2 pi Z)^N.

A :class:`TorusSeries` stores the dense coefficient block ``c[n]`` for all
integer vectors ``n`` with ``|n|_inf <= K``.  Array index ``j`` along every
axis corresponds to frequency ``j - K``.

Points on the torus are passed as arrays whose last axis has length ``N``;
for ``N = 1`` bare scalars and 1-d arrays of angles are accepted too.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InsufficientDataError, ShapeError

TWO_PI = 2.0 * np.pi


def grid_points(dim: int, m: int) -> np.ndarray:
    """Uniform tensor grid ``theta_j = 2 pi j / m`` flattened to shape (m**dim, dim)."""
    axis = TWO_PI * np.arange(m) / m
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def mode_indices(dim: int, band: int) -> np.ndarray:
    """All ``n`` with ``|n|_inf <= band`` in C order of the coefficient block."""
    rng = np.arange(-band, band + 1)
    mesh = np.meshgrid(*([rng] * dim), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _as_points(theta, dim: int) -> tuple[np.ndarray, tuple]:
    theta = np.asarray(theta, dtype=float)
    if dim == 1 and (theta.ndim == 0 or theta.shape[-1] != 1):
        theta = theta[..., None]
    if theta.shape[-1] != dim:
        raise DimensionError(f"expected points with {dim} components, got shape {theta.shape}")
    batch = theta.shape[:-1]
    return theta.reshape(-1, dim), batch


class TorusSeries:
    """Immutable truncated Fourier series ``sum_n c_n exp(i n . theta)``."""

    __slots__ = ("_coeffs", "_dim", "_band")

    def __init__(self, coeffs, *, real: bool = False):
        c = np.array(coeffs, dtype=complex)
        if c.ndim == 0:
            raise ShapeError("coefficient block must have at least one axis")
        side = c.shape[0]
        if side % 2 == 0 or any(s != side for s in c.shape):
            raise ShapeError(f"coefficient block must be a cube of odd side, got {c.shape}")
        if real:
            c = 0.5 * (c + np.conj(c[(slice(None, None, -1),) * c.ndim]))
        c.setflags(write=False)
        self._coeffs = c
        self._dim = c.ndim
        self._band = side // 2

    # construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, dim: int, band: int) -> TorusSeries:
        return cls(np.zeros((2 * band + 1,) * dim, dtype=complex))

    @classmethod
    def constant(cls, dim: int, band: int, value: complex) -> TorusSeries:
        c = np.zeros((2 * band + 1,) * dim, dtype=complex)
        c[(band,) * dim] = value
        return cls(c)

    @classmethod
    def from_dict(cls, dim: int, band: int, terms: dict, *, real: bool = False) -> TorusSeries:
        """Build from ``{n: c_n}``; with ``real=True`` missing conjugate partners are filled in."""
        c = np.zeros((2 * band + 1,) * dim, dtype=complex)
        for n, value in terms.items():
            n = (n,) if np.isscalar(n) else tuple(int(k) for k in n)
            if len(n) != dim:
                raise DimensionError(f"mode {n} does not have {dim} components")
            if max(abs(k) for k in n) > band:
                raise ShapeError(f"mode {n} lies outside band {band}")
            c[tuple(k + band for k in n)] += value
        if real:
            # a term given on one side only stands for c e^{in.theta} + conj
            flipped = np.conj(c[(slice(None, None, -1),) * dim])
            missing = (c == 0) & (flipped != 0)
            c = np.where(missing, flipped, c)
        return cls(c, real=real)

    # basic accessors ---------------------------------------------------
    @property
    def dim(self) -> int:
        return self._dim

    @property
    def band(self) -> int:
        return self._band

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    def __getitem__(self, n) -> complex:
        n = (n,) if np.isscalar(n) else tuple(n)
        if len(n) != self._dim:
            raise DimensionError(f"mode {n} does not have {self._dim} components")
        if max(abs(k) for k in n) > self._band:
            return 0j
        return complex(self._coeffs[tuple(k + self._band for k in n)])

    @property
    def mean(self) -> complex:
        return self[(0,) * self._dim]

    def indices(self) -> np.ndarray:
        return mode_indices(self._dim, self._band)

    def support(self, floor: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Modes with ``|c_n| > floor`` and their coefficients, as flat arrays."""
        flat = self._coeffs.ravel()
        keep = np.abs(flat) > floor
        return self.indices()[keep], flat[keep]

    def is_hermitian(self, tol: float = 0.0) -> bool:
        flipped = np.conj(self._coeffs[(slice(None, None, -1),) * self._dim])
        return bool(np.max(np.abs(self._coeffs - flipped)) <= tol)

    def abs_sum(self) -> float:
        return float(np.sum(np.abs(self._coeffs)))

    def __repr__(self):
        return f"TorusSeries(dim={self._dim}, band={self._band}, mean={self.mean:.6g})"

    # algebra -------------------------------------------------------------
    def with_band(self, band: int) -> TorusSeries:
        """Truncate or zero-pad to a new band."""
        K, d = self._band, self._dim
        out = np.zeros((2 * band + 1,) * d, dtype=complex)
        k = min(K, band)
        src = tuple(slice(K - k, K + k + 1) for _ in range(d))
        dst = tuple(slice(band - k, band + k + 1) for _ in range(d))
        out[dst] = self._coeffs[src]
        return TorusSeries(out)

    def replace(self, coeffs) -> TorusSeries:
        return TorusSeries(coeffs)

    def __add__(self, other):
        if isinstance(other, TorusSeries):
            if other.dim != self.dim:
                raise DimensionError("cannot add series of different dimension")
            band = max(self.band, other.band)
            return TorusSeries(self.with_band(band).coeffs + other.with_band(band).coeffs)
        return TorusSeries(self._coeffs) + TorusSeries.constant(self.dim, self.band, other)

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, scalar):
        if isinstance(scalar, TorusSeries):
            return NotImplemented
        return TorusSeries(self._coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return TorusSeries(-self._coeffs)

    # evaluation -----------------------------------------------------------
    def __call__(self, theta) -> np.ndarray | complex:
        return evaluate(self, theta)

    def derivative(self, axis: int) -> TorusSeries:
        n = self.indices()[:, axis].reshape(self._coeffs.shape)
        return TorusSeries(1j * n * self._coeffs)

    def to_grid(self, m: int | None = None) -> np.ndarray:
        """Values on the uniform ``m``-point tensor grid (shape ``(m,)*N``)."""
        return to_grid(self, m)


def exp_table(x: np.ndarray, band: int, sign: int = 1) -> np.ndarray:
    """``exp(sign i k x)`` for ``k = -band..band`` as an (S, 2 band + 1) array.

    Built by repeated multiplication from one exponential per point; the
    recurrence error grows like ``band`` ulps, negligible at the bands used here.
    """
    z = np.exp(sign * 1j * np.mod(np.asarray(x, dtype=float), TWO_PI))
    out = np.empty((len(z), 2 * band + 1), dtype=complex)
    out[:, band] = 1.0
    for k in range(1, band + 1):
        out[:, band + k] = out[:, band + k - 1] * z
    out[:, :band] = np.conj(out[:, band + 1:][:, ::-1])
    return out


def _contract(coeffs: np.ndarray, theta: np.ndarray, band: int) -> np.ndarray:
    # separable evaluation: one small exponential table per axis, first axis via BLAS
    pts = theta.shape[0]
    freqs = np.arange(-band, band + 1)
    side = 2 * band + 1
    reduced = np.mod(theta, TWO_PI)
    tables = [exp_table(reduced[:, k], band) for k in range(theta.shape[1])]
    out = tables[0] @ coeffs.reshape(side, -1)
    for table in tables[1:]:
        out = np.einsum("sj,sjr->sr", table, out.reshape(pts, side, -1))
    return out[:, 0]


def evaluate(series: TorusSeries, theta) -> np.ndarray | complex:
    """``sum_n c_n exp(i n . theta)`` at one or many points."""
    pts, batch = _as_points(theta, series.dim)
    values = _contract(series.coeffs, pts, series.band)
    return complex(values[0]) if batch == () else values.reshape(batch)


def gradient(series: TorusSeries, theta) -> np.ndarray:
    """Gradient in theta; shape ``batch + (N,)``."""
    pts, batch = _as_points(theta, series.dim)
    cols = [_contract(series.derivative(k).coeffs, pts, series.band) for k in range(series.dim)]
    return np.stack(cols, axis=-1).reshape(batch + (series.dim,))


def from_grid(samples, dim: int | None = None, *, real: bool = True) -> TorusSeries:
    """Band-limited interpolant of samples on the ``(2K+1)^N`` uniform grid.

    ``samples`` is either the tensor block of shape ``(2K+1,)*N`` or a flat
    array of length ``(2K+1)**dim`` in C order (then ``dim`` is required).
    """
    arr = np.asarray(samples)
    if dim is not None and arr.ndim == 1 and dim > 1:
        side = round(arr.size ** (1.0 / dim))
        if side**dim != arr.size:
            raise ShapeError(f"{arr.size} samples is not a perfect {dim}-th power")
        arr = arr.reshape((side,) * dim)
    if dim is not None and arr.ndim != dim:
        raise ShapeError(f"expected a {dim}-dimensional sample block, got shape {arr.shape}")
    side = arr.shape[0]
    if arr.ndim == 0 or side % 2 == 0 or any(s != side for s in arr.shape):
        raise ShapeError(f"sample count must be (2K+1)^N, got shape {arr.shape}")
    coeffs = np.fft.fftshift(np.fft.fftn(arr)) / arr.size
    return TorusSeries(coeffs, real=real and np.isrealobj(arr))


def to_grid(series: TorusSeries, m: int | None = None) -> np.ndarray:
    K, d = series.band, series.dim
    m = 2 * K + 1 if m is None else int(m)
    if m < 2 * K + 1:
        raise ShapeError(f"grid of {m} points cannot resolve band {K}")
    block = np.zeros((m,) * d, dtype=complex)
    # frequency k lives at index k mod m after ifftshift-free placement
    idx = np.mod(np.arange(-K, K + 1), m)
    block[np.ix_(*([idx] * d))] = series.coeffs
    return np.fft.ifftn(block) * m**d


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    residual: float
    shells: int


def shell_maxima(series: TorusSeries) -> np.ndarray:
    """Largest ``|c_n|`` on each shell ``|n|_inf = s`` for ``s = 0..K``."""
    inf = np.max(np.abs(series.indices()), axis=1)
    mags = np.abs(series.coeffs).ravel()
    out = np.zeros(series.band + 1)
    np.maximum.at(out, inf, mags)
    return out


def decay_audit(series: TorusSeries, noise_floor: float = 1e-13) -> DecayFit:
    """Fit ``log|c_n| ~ slope * log(1+s) + intercept`` over shells ``s >= 1``.

    Shells whose representative falls below ``noise_floor`` times the
    largest representative are treated as numerically zero.
    """
    reps = shell_maxima(series)[1:]
    shells = np.arange(1, series.band + 1)
    top = reps.max() if reps.size else 0.0
    keep = reps > noise_floor * top if top > 0 else np.zeros_like(reps, dtype=bool)
    if keep.sum() < 2:
        raise InsufficientDataError(f"only {int(keep.sum())} nonzero shell(s); need at least 2")
    x = np.log1p(shells[keep])
    y = np.log(reps[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return DecayFit(float(slope), float(intercept), resid, int(keep.sum()))


def dump_csv(series: TorusSeries, skip_zeros: bool = True) -> str:
    """Coefficient table with columns ``n_1..n_N, re, im``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"n_{k + 1}" for k in range(series.dim)] + ["re", "im"])
    for n, c in zip(series.indices(), series.coeffs.ravel()):
        if skip_zeros and c == 0:
            continue
        writer.writerow([int(k) for k in n] + [repr(float(c.real)), repr(float(c.imag))])
    return buf.getvalue()


def load_csv(text: str, band: int | None = None) -> TorusSeries:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], [r for r in rows[1:] if r]
    dim = len(header) - 2
    modes = [tuple(int(v) for v in r[:dim]) for r in body]
    if band is None:
        band = max((max(abs(k) for k in n) for n in modes), default=0)
    terms: dict = {}
    for n, r in zip(modes, body):
        terms[n] = terms.get(n, 0) + complex(float(r[dim]), float(r[dim + 1]))
    return TorusSeries.from_dict(dim, band, terms)


def all_nonzero_modes(dim: int, band: int):
    """Iterate over ``n != 0`` with ``|n|_inf <= band``."""
    for n in itertools.product(range(-band, band + 1), repeat=dim):
        if any(n):
            yield n
