"""Periodic unit-torus discretization.

Grids are cell centred: sample ``values[i, j]`` sits at
``x = ((i + 1/2) h, (j + 1/2) h)`` with ``h = 1/N``.  The first array axis
is ``x1`` and the second is ``x2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np
from scipy import integrate

MAX_LOG2_N = 14


@dataclass(frozen=True)
class TorusGrid:
    n_cells: int

    def __post_init__(self):
        n = self.n_cells
        if not isinstance(n, (int, np.integer)) or n < 4 or n & (n - 1):
            raise ValueError(f"grid size must be a power of two >= 4, got {n!r}")
        if n > 2**MAX_LOG2_N:
            raise ValueError(f"grid size {n} exceeds the supported maximum 2**{MAX_LOG2_N}")
        object.__setattr__(self, "n_cells", int(n))

    @property
    def dimension(self) -> int:
        return 2

    @property
    def spacing_exact(self) -> Fraction:
        return Fraction(1, self.n_cells)

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def log2(self) -> int:
        return self.n_cells.bit_length() - 1

    @cached_property
    def axis(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) / self.n_cells

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates as two ``(N, N)`` arrays (``ij`` indexing)."""
        return np.meshgrid(self.axis, self.axis, indexing="ij")

    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.fft.fftfreq(self.n_cells, d=1.0 / self.n_cells)
        return np.meshgrid(k, k, indexing="ij")

    def sample(self, func) -> "ScalarGridField":
        x1, x2 = self.centers()
        vals = np.broadcast_to(np.asarray(func(x1, x2), dtype=float), x1.shape)
        return ScalarGridField(self, np.array(vals))


@dataclass(frozen=True, eq=False)
class ScalarGridField:
    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        n = self.grid.n_cells
        if vals.shape != (n, n):
            raise ValueError(f"values of shape {vals.shape} do not match grid {n}x{n}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def value(self, i: int, j: int) -> float:
        n = self.grid.n_cells
        return float(self.values[i % n, j % n])

    def mean(self) -> float:
        return float(np.mean(self.values))

    def with_values(self, values) -> "ScalarGridField":
        return ScalarGridField(self.grid, values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _check_same_grid(f: ScalarGridField, g: ScalarGridField):
    if f.grid != g.grid:
        raise ValueError(f"grid mismatch: {f.grid.n_cells} vs {g.grid.n_cells}")


def _use_pairwise(grid: TorusGrid, summation: str) -> bool:
    if summation == "auto":
        return grid.n_cells >= 2048
    if summation not in ("pairwise", "dot"):
        raise ValueError(f"unknown summation mode {summation!r}")
    return summation == "pairwise"


def norm_l2(f: ScalarGridField, summation: str = "auto") -> float:
    v = f.values
    if _use_pairwise(f.grid, summation):
        s = np.sum(v * v)
    else:
        s = np.vdot(v, v)
    return math.sqrt(float(s)) * f.grid.h


def norm_linf(f: ScalarGridField) -> float:
    return float(np.max(np.abs(f.values)))


def pairing(f: ScalarGridField, g: ScalarGridField, summation: str = "auto") -> float:
    """Equal-weight quadrature of ``f * g`` over the torus."""
    _check_same_grid(f, g)
    if _use_pairwise(f.grid, summation):
        s = np.sum(f.values * g.values)
    else:
        s = np.vdot(f.values, g.values)
    return float(s) * f.grid.h**2


def _phase(grid: TorusGrid) -> np.ndarray:
    k1, k2 = grid.wavenumbers()
    return np.exp(-1j * np.pi * (k1 + k2) / grid.n_cells)


def to_spectral(f: ScalarGridField) -> np.ndarray:
    """Fourier coefficients ``c_k = N^-2 sum_x f(x) exp(-2 pi i k.x)`` of the
    trigonometric interpolant (cell-centre phase included)."""
    n = f.grid.n_cells
    return np.fft.fft2(f.values) * _phase(f.grid) / n**2


def from_spectral(coeffs: np.ndarray, grid: TorusGrid) -> ScalarGridField:
    n = grid.n_cells
    if coeffs.shape != (n, n):
        raise ValueError(f"coefficient shape {coeffs.shape} does not match grid {n}x{n}")
    vals = np.fft.ifft2(coeffs / _phase(grid) * n**2).real
    return ScalarGridField(grid, vals)


def spectral_energy(f: ScalarGridField) -> float:
    return float(np.sum(np.abs(to_spectral(f)) ** 2))


def gradient_symbol(grid: TorusGrid) -> np.ndarray:
    k1, k2 = grid.wavenumbers()
    return (2 * np.pi) ** 2 * (k1**2 + k2**2)


def h1_seminorm_sq(f: ScalarGridField) -> float:
    """Spectral ``||grad f||^2``; exact for band-limited fields."""
    c = to_spectral(f)
    return float(np.sum(gradient_symbol(f.grid) * np.abs(c) ** 2))


def spacetime_quadrature(samples, times, horizon: float | None = None) -> float:
    """Trapezoidal time integral of per-node values."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(samples, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("at least two time nodes are required")
    if y.shape != t.shape:
        raise ValueError(f"{y.size} samples for {t.size} time nodes")
    if np.any(np.diff(t) <= 0):
        raise ValueError("time nodes must be strictly increasing")
    if t[0] < 0 or (horizon is not None and t[-1] > horizon):
        raise ValueError("time nodes must lie in [0, T]")
    return float(np.trapezoid(y, t))


def trapezoid_weights(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


# ---------------------------------------------------------------------------
# Bump profiles


def bump(s):
    """``exp(1 - 1/(1 - s^2))`` on ``|s| < 1``, zero elsewhere (peak value 1)."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - si * si))
    return out


def bump_d1(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    u = 1.0 - si * si
    out[inside] = np.exp(1.0 - 1.0 / u) * (-2.0 * si / u**2)
    return out


def bump_d2(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    u = 1.0 - si * si
    g = -2.0 * si / u**2
    gp = -2.0 / u**2 - 8.0 * si * si / u**3
    out[inside] = np.exp(1.0 - 1.0 / u) * (g * g + gp)
    return out


def _radial(q):
    """Bump as a function of the squared radius ``q``, and its q-derivatives."""
    q = np.asarray(q, dtype=float)
    p0 = np.zeros_like(q)
    p1 = np.zeros_like(q)
    p2 = np.zeros_like(q)
    inside = q < 1
    qi = q[inside]
    u = 1.0 - qi
    e = np.exp(1.0 - 1.0 / u)
    p0[inside] = e
    p1[inside] = -e / u**2
    p2[inside] = e * (2.0 * qi - 1.0) / u**4
    return p0, p1, p2


BUMP_INTEGRAL = integrate.quad(lambda s: math.exp(1 - 1 / (1 - s * s)), -1, 1, epsabs=0, epsrel=1e-12, limit=200)[0]
BUMP_SQ_INTEGRAL = integrate.quad(lambda s: math.exp(2 - 2 / (1 - s * s)), -1, 1, epsabs=0, epsrel=1e-12, limit=200)[0]
# int_0^1 psi(q)^2 dq, where the radial profile is psi evaluated at q = r^2
RADIAL_SQ_INTEGRAL = integrate.quad(lambda q: math.exp(2 - 2 / (1 - q)), 0, 1, epsabs=0, epsrel=1e-12, limit=200)[0]
RADIAL_INTEGRAL = integrate.quad(lambda q: math.exp(1 - 1 / (1 - q)), 0, 1, epsabs=0, epsrel=1e-12, limit=200)[0]


def periodic_offset(x, c):
    """Minimal-image displacement ``x - c`` on the unit circle, in [-1/2, 1/2)."""
    return np.mod(np.asarray(x, dtype=float) - c + 0.5, 1.0) - 0.5


@dataclass(frozen=True)
class _SpaceTimeBump:
    """``amplitude * bump((t - t0)/r_t) * radial_bump(|x - x0|/r_x)``."""

    t0: float
    x0: tuple[float, float]
    r_t: float
    r_x: float
    amplitude: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.r_t <= 0 or self.r_x <= 0:
            raise ValueError("bump radii must be positive")
        if self.r_x >= 0.5:
            raise ValueError("spatial radius must be below 1/2 so the ball does not wrap")
        object.__setattr__(self, "x0", (float(self.x0[0]) % 1.0, float(self.x0[1]) % 1.0))

    @property
    def time_support(self) -> tuple[float, float]:
        return (self.t0 - self.r_t, self.t0 + self.r_t)

    def time_profile(self, t):
        return self.amplitude * bump((np.asarray(t, dtype=float) - self.t0) / self.r_t)

    def time_profile_dt(self, t):
        return self.amplitude * bump_d1((np.asarray(t, dtype=float) - self.t0) / self.r_t) / self.r_t

    def _q(self, x1, x2):
        d1 = periodic_offset(x1, self.x0[0])
        d2 = periodic_offset(x2, self.x0[1])
        return d1, d2, (d1 * d1 + d2 * d2) / self.r_x**2

    def space_profile(self, x1, x2):
        return _radial(self._q(x1, x2)[2])[0]

    def space_gradient(self, x1, x2):
        d1, d2, q = self._q(x1, x2)
        p1 = _radial(q)[1]
        scale = 2.0 / self.r_x**2
        return p1 * scale * d1, p1 * scale * d2

    def space_laplacian(self, x1, x2):
        d1, d2, q = self._q(x1, x2)
        _, p1, p2 = _radial(q)
        r2 = self.r_x**2
        return p2 * 4.0 * (d1 * d1 + d2 * d2) / r2**2 + p1 * 4.0 / r2

    def value(self, t, x1, x2):
        return self.time_profile(t) * self.space_profile(x1, x2)

    def dt(self, t, x1, x2):
        return self.time_profile_dt(t) * self.space_profile(x1, x2)

    def grad(self, t, x1, x2):
        a = self.time_profile(t)
        g1, g2 = self.space_gradient(x1, x2)
        return a * g1, a * g2

    def laplacian(self, t, x1, x2):
        return self.time_profile(t) * self.space_laplacian(x1, x2)

    def in_support(self, t, x1, x2):
        lo, hi = self.time_support
        t = np.asarray(t, dtype=float)
        return (t > lo) & (t < hi) & (self._q(x1, x2)[2] < 1)

    def sup_time_integral(self) -> float:
        """``int ||f(s, .)||_inf ds`` over the whole time support."""
        return abs(self.amplitude) * self.r_t * BUMP_INTEGRAL

    def space_l2_sq(self) -> float:
        return math.pi * self.r_x**2 * RADIAL_SQ_INTEGRAL

    def space_l1(self) -> float:
        return math.pi * self.r_x**2 * RADIAL_INTEGRAL

    def l2_sq_from(self, t: float) -> float:
        """``||f||^2`` over ``(t, T) x T^2``."""
        lo, hi = self.time_support
        a = max(t, lo)
        if a >= hi:
            return 0.0
        val = integrate.quad(lambda s: float(self.time_profile(s)) ** 2, a, hi, epsabs=1e-15, epsrel=1e-12, limit=200)[0]
        return val * self.space_l2_sq()

    def time_integral_from(self, t: float) -> float:
        lo, hi = self.time_support
        a = max(t, lo)
        if a >= hi:
            return 0.0
        return integrate.quad(lambda s: float(self.time_profile(s)), a, hi, epsabs=1e-15, epsrel=1e-12, limit=200)[0]

    def sample_space(self, grid: TorusGrid) -> np.ndarray:
        x1, x2 = grid.centers()
        return self.space_profile(x1, x2)


@dataclass(frozen=True)
class SourceSpec(_SpaceTimeBump):
    """Smooth source compactly supported in ``(0, T) x T^2``."""

    def __post_init__(self):
        super().__post_init__()
        lo, hi = self.time_support
        if not (lo > 0 and hi < self.horizon):
            raise ValueError(f"source time support ({lo:g}, {hi:g}) must lie inside (0, {self.horizon:g})")


@dataclass(frozen=True)
class TestFunctionSpec(_SpaceTimeBump):
    """Test function for weak formulations.

    ``side="forward"`` functions may be nonzero at ``t = 0`` but vanish near
    ``t = T``; ``side="backward"`` functions are the mirror image.
    """

    side: str = "forward"

    __test__ = False  # not a pytest class

    def __post_init__(self):
        super().__post_init__()
        lo, hi = self.time_support
        if self.side == "forward":
            if not hi < self.horizon:
                raise ValueError("forward test functions must vanish near t = T")
        elif self.side == "backward":
            if not lo > 0:
                raise ValueError("backward test functions must vanish near t = 0")
        else:
            raise ValueError(f"unknown side {self.side!r}")


# ---------------------------------------------------------------------------
# Closed-form initial data


@dataclass(frozen=True)
class SingleMode:
    """``amplitude * cos(2 pi (k1 x1 + k2 x2) + phase)``."""

    k1: int = 1
    k2: int = 0
    amplitude: float = 1.0
    phase: float = 0.0

    def __call__(self, x1, x2):
        arg = 2 * np.pi * (self.k1 * np.asarray(x1) + self.k2 * np.asarray(x2)) + self.phase
        return self.amplitude * np.cos(arg)

    def sample(self, grid: TorusGrid) -> ScalarGridField:
        return grid.sample(self)


@dataclass(frozen=True)
class ConstantDatum:
    value: float = 1.0

    def __call__(self, x1, x2):
        return np.full(np.broadcast(np.asarray(x1), np.asarray(x2)).shape, float(self.value))

    def sample(self, grid: TorusGrid) -> ScalarGridField:
        return grid.sample(self)
