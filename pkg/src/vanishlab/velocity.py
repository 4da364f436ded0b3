"""Exactly evaluable divergence-free velocity fields on the unit torus.

Every field is described by a sequence of time-constant *pieces*.  Shear
pieces move one coordinate at a speed depending only on the other, so their
characteristics are closed form; a field built only from shears (or zero
pieces) therefore has an exact flow map.

The dyadic-exchange field is active on the slabs ``I_n = (2^-n-1, 2^-n]``.
On slab ``n`` (fine cell ``a = 2^-n-1``) it runs two half-slab square-wave
shears:

* A: strips ``{x2 mod 4a in [a, 3a)}`` move by ``+a`` along ``x1`` (speed 2);
* B: strips ``{x1 mod 4a in [a, 3a)}`` move by ``+2a`` along ``x2`` (speed 4).

Transporting the checkerboard ``c_{n+1}`` through the slab yields ``c_n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss

from .torus import (
    BUMP_INTEGRAL,
    MAX_LOG2_N,
    ScalarGridField,
    TorusGrid,
    bump,
    bump_d1,
)


class NoExactFlow(ValueError):
    """Raised when a closed-form flow is requested for a field without one."""


class StepBudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Mollifier


_CDF_CELLS = 4096
_CDF_ORDER = 8


@dataclass(frozen=True)
class MollifierSpec:
    """Tensor bump ``w(z) = w1(z1) w1(z2)`` with ``w1(z) ~ bump(2z - 1)``,
    supported in ``(0, 1)^2`` and of unit mass."""

    quadrature_order: int = 16

    def __post_init__(self):
        total = float(np.sum(self._fine_weights)) ** 2
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"mollifier integrates to {total!r}, not 1")

    @property
    def norm1(self) -> float:
        return BUMP_INTEGRAL / 2.0

    def w1(self, z):
        return bump(2.0 * np.asarray(z, dtype=float) - 1.0) / self.norm1

    def w1_d1(self, z):
        return 2.0 * bump_d1(2.0 * np.asarray(z, dtype=float) - 1.0) / self.norm1

    def w(self, z1, z2):
        return self.w1(z1) * self.w1(z2)

    @cached_property
    def _fine_nodes(self) -> np.ndarray:
        g, _ = leggauss(_CDF_ORDER)
        left = np.arange(_CDF_CELLS) / _CDF_CELLS
        return left[:, None] + (g[None, :] + 1.0) / (2 * _CDF_CELLS)

    @cached_property
    def _fine_weights(self) -> np.ndarray:
        _, gw = leggauss(_CDF_ORDER)
        return self.w1(self._fine_nodes) * gw[None, :] / (2 * _CDF_CELLS)

    @cached_property
    def _cdf_table(self) -> np.ndarray:
        cell = np.sum(self._fine_weights, axis=1)
        table = np.concatenate([[0.0], np.cumsum(cell)])
        return table / table[-1]

    def cdf1(self, s):
        """``W(s) = int_0^s w1`` via cubic Hermite interpolation of a fine table."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        m = _CDF_CELLS
        u = s * m
        j = np.minimum(np.floor(u).astype(np.int64), m - 1)
        tau = u - j
        h = 1.0 / m
        y0 = self._cdf_table[j]
        y1 = self._cdf_table[j + 1]
        d0 = self.w1(j * h) * h
        d1 = self.w1((j + 1) * h) * h
        t2 = tau * tau
        t3 = t2 * tau
        return ((2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + tau) * d0
                + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * d1)

    def char1(self, omega: float) -> complex:
        """``int_0^1 exp(-i omega z) w1(z) dz``."""
        return complex(np.sum(self._fine_weights * np.exp(-1j * omega * self._fine_nodes)))

    @cached_property
    def product_rule(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fixed Gauss-Legendre product rule on ``(0,1)^2`` weighted by ``w``;
        the weights are renormalised to sum to one."""
        g, gw = leggauss(self.quadrature_order)
        z = (g + 1.0) / 2.0
        wz = gw / 2.0 * self.w1(z)
        z1, z2 = np.meshgrid(z, z, indexing="ij")
        wts = np.outer(wz, wz)
        return z1.ravel(), z2.ravel(), (wts / wts.sum()).ravel()

    @cached_property
    def grad_max(self) -> float:
        """``max |grad w|`` over ``(0,1)^2``."""
        z = np.linspace(0.0, 1.0, 2001)
        a = self.w1(z)
        d = np.abs(self.w1_d1(z))
        # the maximum of sqrt(d(z1)^2 a(z2)^2 + a(z1)^2 d(z2)^2) over the grid
        best = 0.0
        for i in range(0, z.size, 4):
            val = np.sqrt(d[i] ** 2 * a**2 + a[i] ** 2 * d**2)
            best = max(best, float(val.max()))
        return best

    def grad_max_scaled(self, delta: float) -> float:
        """``max |grad w^delta| = max |grad w| / delta^(d+1)`` with ``d = 2``."""
        return self.grad_max / delta**3

    def first_moment(self) -> float:
        return 0.5

    def second_moment(self) -> float:
        """``int z^2 w1(z) dz``."""
        return float(np.sum(self._fine_weights * self._fine_nodes**2))


# ---------------------------------------------------------------------------
# One-dimensional profiles


@dataclass(frozen=True)
class SineProfile:
    """``amplitude * sin(2 pi k y + phase)``."""

    amplitude: float = 1.0
    k: int = 1
    phase: float = 0.0

    def __call__(self, y):
        return self.amplitude * np.sin(2 * np.pi * self.k * np.asarray(y, dtype=float) + self.phase)

    def deriv(self, y):
        return 2 * np.pi * self.k * self.amplitude * np.cos(2 * np.pi * self.k * np.asarray(y, dtype=float) + self.phase)

    def sup(self) -> float:
        return abs(self.amplitude)

    def lipschitz(self) -> float:
        return abs(2 * np.pi * self.k * self.amplitude)

    def l1(self) -> float:
        return 2 * abs(self.amplitude) / np.pi if self.k else abs(self.amplitude * math.sin(self.phase))

    def total_variation(self) -> float:
        return 4 * abs(self.amplitude * self.k)

    def mollify(self, mollifier: MollifierSpec, delta: float) -> "SineProfile":
        m = mollifier.char1(2 * np.pi * self.k * delta)
        return SineProfile(self.amplitude * abs(m), self.k, self.phase + float(np.angle(m)))


@dataclass(frozen=True)
class SquareWave:
    """``speed`` on ``{y mod period in [lo, hi)}``, zero elsewhere."""

    period: float
    lo: float
    hi: float
    speed: float

    def __call__(self, y):
        r = np.mod(np.asarray(y, dtype=float), self.period)
        return np.where((r >= self.lo) & (r < self.hi), self.speed, 0.0)

    def deriv(self, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def sup(self) -> float:
        return abs(self.speed)

    def lipschitz(self) -> float:
        return math.inf

    def l1(self) -> float:
        return abs(self.speed) * (self.hi - self.lo) / self.period

    def total_variation(self) -> float:
        return 2 * abs(self.speed) / self.period

    def mollify(self, mollifier: MollifierSpec, delta: float) -> "MollifiedSquareWave":
        return MollifiedSquareWave(self, mollifier, delta)


@dataclass(frozen=True)
class MollifiedSquareWave:
    """``(u * w1^delta)(y) = int_0^1 u(y - delta z) w1(z) dz``, evaluated as
    ``u(y - delta) + sum_jumps J_p W((y - p)/delta)`` over the jumps ``p`` in
    ``(y - delta, y)``."""

    base: SquareWave
    mollifier: MollifierSpec
    delta: float

    def _jumps(self):
        b = self.base
        return ((b.lo, b.speed), (b.hi, -b.speed))

    def _window_sum(self, y, kernel):
        b = self.base
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        count = int(math.ceil(self.delta / b.period)) + 2
        for pos, jump in self._jumps():
            m0 = np.floor((y - self.delta - pos) / b.period)
            for k in range(count):
                p = pos + (m0 + k) * b.period
                s = (y - p) / self.delta
                inside = (s > 0) & (s < 1)
                out += np.where(inside, jump * kernel(np.where(inside, s, 0.5)), 0.0)
        return out

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return self.base(y - self.delta) + self._window_sum(y, self.mollifier.cdf1)

    def deriv(self, y):
        return self._window_sum(y, self.mollifier.w1) / self.delta

    def sup(self) -> float:
        return self.base.sup()

    def lipschitz(self) -> float:
        return 2 * abs(self.base.speed) * float(np.max(self.mollifier.w1(np.linspace(0, 1, 4001)))) / self.delta

    def l1(self) -> float:
        if self.base.speed >= 0:
            return self.base.l1()
        return self.base.l1()

    def total_variation(self) -> float:
        return self.base.total_variation()

    def mollify(self, mollifier, delta):
        raise NotImplementedError("repeated mollification is not supported")


# ---------------------------------------------------------------------------
# Time-constant pieces


@dataclass(frozen=True)
class ZeroPiece:
    def eval(self, x1, x2):
        z = np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)
        return z, z.copy()

    def divergence(self, x1, x2):
        return np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)

    def sup(self) -> float:
        return 0.0

    def lipschitz(self) -> float:
        return 0.0

    def l1(self) -> float:
        return 0.0

    def total_variation(self) -> float:
        return 0.0

    @property
    def is_shear(self) -> bool:
        return True

    def advance(self, dt, x1, x2):
        return np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)

    def mollify(self, mollifier, delta):
        return self


@dataclass(frozen=True)
class ShearPiece:
    """``axis=0``: ``b = (f(x2), 0)``;  ``axis=1``: ``b = (0, f(x1))``."""

    axis: int
    profile: object

    def eval(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        zero = np.zeros(x1.shape)
        if self.axis == 0:
            return self.profile(x2) * np.ones(x1.shape), zero
        return zero, self.profile(x1) * np.ones(x1.shape)

    def divergence(self, x1, x2):
        # the moving coordinate never enters the profile
        return np.zeros(np.broadcast(np.asarray(x1), np.asarray(x2)).shape)

    def sup(self) -> float:
        return self.profile.sup()

    def lipschitz(self) -> float:
        return self.profile.lipschitz()

    def l1(self) -> float:
        return self.profile.l1()

    def total_variation(self) -> float:
        return self.profile.total_variation()

    @property
    def is_shear(self) -> bool:
        return True

    def advance(self, dt, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if self.axis == 0:
            return np.mod(x1 + dt * self.profile(x2), 1.0), np.mod(x2, 1.0) * np.ones_like(x1)
        return np.mod(x1, 1.0) * np.ones_like(x2), np.mod(x2 + dt * self.profile(x1), 1.0)

    def mollify(self, mollifier, delta):
        return ShearPiece(self.axis, self.profile.mollify(mollifier, delta))


@dataclass(frozen=True)
class StreamPiece:
    """``b = grad^perp psi = (d2 psi, -d1 psi)`` with ``psi = A f1(x1) f2(x2)``."""

    f1: SineProfile
    f2: SineProfile
    amplitude: float = 1.0

    def eval(self, x1, x2):
        a = self.amplitude
        return a * self.f1(x1) * self.f2.deriv(x2), -a * self.f1.deriv(x1) * self.f2(x2)

    def divergence(self, x1, x2):
        a = self.amplitude
        d11 = a * self.f1.deriv(x1) * self.f2.deriv(x2)
        d22 = -a * self.f1.deriv(x1) * self.f2.deriv(x2)
        return d11 + d22

    def sup(self) -> float:
        return abs(self.amplitude) * math.hypot(self.f1.sup() * self.f2.lipschitz(), self.f1.lipschitz() * self.f2.sup())

    def lipschitz(self) -> float:
        g1 = self.f1.lipschitz()
        g2 = self.f2.lipschitz()
        return abs(self.amplitude) * 2 * max(g1, g2) * max(g1, g2)

    def l1(self) -> float:
        x1, x2 = np.meshgrid((np.arange(256) + 0.5) / 256, (np.arange(256) + 0.5) / 256, indexing="ij")
        b1, b2 = self.eval(x1, x2)
        return float(np.mean(np.hypot(b1, b2)))

    def total_variation(self) -> float:
        x1, x2 = np.meshgrid((np.arange(256) + 0.5) / 256, (np.arange(256) + 0.5) / 256, indexing="ij")
        a = self.amplitude
        f1, f2 = self.f1, self.f2
        # |Db| for smooth b is the integral of the Frobenius norm of grad b
        h1 = f1(x1) * 0
        d1 = f1.deriv(x1)
        g2 = f2.deriv(x2)
        s1 = f1(x1)
        s2 = f2(x2)
        k1 = 2 * np.pi * f1.k
        k2 = 2 * np.pi * f2.k
        dd1 = -k1**2 * s1
        dd2 = -k2**2 * s2
        j11 = a * d1 * g2
        j12 = a * s1 * dd2
        j21 = -a * dd1 * s2
        j22 = -a * d1 * g2
        return float(np.mean(np.sqrt(j11**2 + j12**2 + j21**2 + j22**2 + h1)))

    @property
    def is_shear(self) -> bool:
        return False

    def mollify(self, mollifier, delta):
        return StreamPiece(self.f1.mollify(mollifier, delta), self.f2.mollify(mollifier, delta), self.amplitude)


@dataclass(frozen=True)
class QuadratureMollifiedPiece:
    """``(b * w^delta)(x) = int b(x - delta z) w(z) dz`` by the mollifier's
    fixed Gauss-Legendre product rule."""

    base: object
    mollifier: MollifierSpec
    delta: float

    def eval(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        z1, z2, wts = self.mollifier.product_rule
        o1 = np.zeros(x1.shape)
        o2 = np.zeros(x1.shape)
        for a, b, w in zip(z1, z2, wts):
            b1, b2 = self.base.eval(x1 - self.delta * a, x2 - self.delta * b)
            o1 += w * b1
            o2 += w * b2
        return o1, o2

    def divergence(self, x1, x2):
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        z1, z2, wts = self.mollifier.product_rule
        out = np.zeros(x1.shape)
        for a, b, w in zip(z1, z2, wts):
            out += w * self.base.divergence(x1 - self.delta * a, x2 - self.delta * b)
        return out

    def sup(self) -> float:
        return self.base.sup()

    def lipschitz(self) -> float:
        return self.base.l1() * self.mollifier.grad_max_scaled(self.delta)

    def l1(self) -> float:
        return self.base.l1()

    def total_variation(self) -> float:
        return self.base.total_variation()

    @property
    def is_shear(self) -> bool:
        return False

    def mollify(self, mollifier, delta):
        return QuadratureMollifiedPiece(self, mollifier, delta)


# ---------------------------------------------------------------------------
# Velocity field variants


@dataclass(frozen=True)
class Piece:
    start: float
    end: float
    field: object


class VelocityField:
    """Base class: subclasses provide ``horizon`` and ``_pieces()``."""

    horizon: float = 1.0
    kind: str = "abstract"

    def _pieces(self) -> list[Piece]:
        raise NotImplementedError

    @cached_property
    def pieces(self) -> tuple[Piece, ...]:
        return tuple(self._pieces())

    def breakpoints(self) -> list[float]:
        """Interior times where the field may jump."""
        pts = {p.start for p in self.pieces} | {p.end for p in self.pieces}
        return sorted(t for t in pts if 0 < t < self.horizon)

    def piece_at(self, t: float):
        if t <= 0:
            raise ValueError(f"velocity evaluated at t={t!r}; fields are defined for t in (0, T]")
        if t > self.horizon:
            raise ValueError(f"t={t!r} is beyond the horizon {self.horizon!r}")
        for p in self.pieces:
            if p.start < t <= p.end:
                return p.field
        return self.pieces[0].field

    def pieces_between(self, ta: float, tb: float) -> list[tuple[float, float, object]]:
        """Pieces clipped to ``[min, max]`` of the two times, in increasing time."""
        lo, hi = min(ta, tb), max(ta, tb)
        out = []
        for p in self.pieces:
            a, b = max(p.start, lo), min(p.end, hi)
            if b > a:
                out.append((a, b, p.field))
        return out

    @property
    def has_exact_flow(self) -> bool:
        return all(p.field.is_shear for p in self.pieces)

    def eval(self, t: float, x1, x2):
        return self.piece_at(t).eval(x1, x2)

    def divergence(self, t: float, x1, x2):
        return self.piece_at(t).divergence(x1, x2)

    def sup_norm(self, ta: float = 0.0, tb: float | None = None) -> float:
        tb = self.horizon if tb is None else tb
        vals = [f.sup() for _, _, f in self.pieces_between(ta, tb)]
        return max(vals, default=0.0)

    def l1l1_norm(self, ta: float = 0.0, tb: float | None = None) -> float:
        tb = self.horizon if tb is None else tb
        return sum((b - a) * f.l1() for a, b, f in self.pieces_between(ta, tb))

    def bv_norm(self, t: float) -> float:
        """Total variation ``|D b(t, .)|(T^2)``."""
        return self.piece_at(t).total_variation()

    def active_window(self) -> tuple[float, float]:
        active = [p for p in self.pieces if p.field.sup() > 0]
        if not active:
            return (0.0, 0.0)
        return (active[0].start, active[-1].end)

    def describe(self) -> dict:
        return {"kind": self.kind, "horizon": self.horizon}


@dataclass(frozen=True)
class ZeroField(VelocityField):
    horizon: float = 1.0
    kind = "zero"

    def _pieces(self):
        return [Piece(0.0, self.horizon, ZeroPiece())]


@dataclass(frozen=True)
class SteadyShear(VelocityField):
    axis: int = 0
    profile: object = field(default_factory=SineProfile)
    horizon: float = 1.0
    kind = "shear"

    def __post_init__(self):
        if self.axis not in (0, 1):
            raise ValueError("shear axis must be 0 or 1")

    def _pieces(self):
        return [Piece(0.0, self.horizon, ShearPiece(self.axis, self.profile))]

    def describe(self):
        p = self.profile
        return {"kind": self.kind, "axis": self.axis, "amplitude": p.amplitude, "k": p.k,
                "phase": p.phase, "horizon": self.horizon}


@dataclass(frozen=True)
class SteadyStream(VelocityField):
    """Cellular flow with stream function ``A f1(x1) f2(x2)``."""

    f1: SineProfile = field(default_factory=SineProfile)
    f2: SineProfile = field(default_factory=SineProfile)
    amplitude: float = 1.0 / (2 * np.pi)
    horizon: float = 1.0
    kind = "stream"

    def _pieces(self):
        return [Piece(0.0, self.horizon, StreamPiece(self.f1, self.f2, self.amplitude))]

    def describe(self):
        return {"kind": self.kind, "amplitude": self.amplitude, "k1": self.f1.k, "k2": self.f2.k,
                "phase1": self.f1.phase, "phase2": self.f2.phase, "horizon": self.horizon}


@dataclass(frozen=True)
class SlabDescriptor:
    n: int
    interval: tuple[float, float]
    substeps: tuple[tuple[float, int, SquareWave], ...]


@dataclass(frozen=True)
class DyadicExchange(VelocityField):
    n_min: int = 1
    n_max: int = 4
    orientation: str = "xy"
    horizon: float = 1.0
    kind = "dyadic_exchange"

    def __post_init__(self):
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1: c_0 is constant on the unit torus, so slab I_0 has no exchange")
        if self.n_max < self.n_min:
            raise ValueError("n_max must be >= n_min")
        if self.n_max + 2 > MAX_LOG2_N:
            raise ValueError(f"n_max={self.n_max} is too fine for any supported grid (max N = 2**{MAX_LOG2_N})")
        if self.orientation not in ("xy", "yx"):
            raise ValueError("orientation must be 'xy' or 'yx'")
        if self.horizon < 2.0 ** -self.n_min:
            raise ValueError("horizon must cover the coarsest slab")

    @property
    def activation_time(self) -> float:
        return 2.0 ** (-self.n_max - 1)

    def slabs(self) -> list[SlabDescriptor]:
        first, second = (0, 1) if self.orientation == "xy" else (1, 0)
        out = []
        for n in range(self.n_max, self.n_min - 1, -1):
            a = 2.0 ** (-n - 1)
            sub_a = SquareWave(4 * a, a, 3 * a, 2.0)
            sub_b = SquareWave(4 * a, a, 3 * a, 4.0)
            out.append(SlabDescriptor(n, (a, 2 * a), ((0.5, first, sub_a), (0.5, second, sub_b))))
        return out

    def _pieces(self):
        pieces = [Piece(0.0, self.activation_time, ZeroPiece())]
        for slab in self.slabs():
            t0, t1 = slab.interval
            t = t0
            for frac, axis, prof in slab.substeps:
                dt = frac * (t1 - t0)
                pieces.append(Piece(t, t + dt, ShearPiece(axis, prof)))
                t += dt
        if self.horizon > 2.0 ** -self.n_min:
            pieces.append(Piece(2.0 ** -self.n_min, self.horizon, ZeroPiece()))
        return pieces

    def describe(self):
        return {"kind": self.kind, "n_min": self.n_min, "n_max": self.n_max,
                "orientation": self.orientation, "horizon": self.horizon,
                "activation_time": self.activation_time}


@dataclass(frozen=True)
class Mollified(VelocityField):
    """Spatial mollification ``b * w^delta``; time is untouched."""

    base: VelocityField = field(default_factory=ZeroField)
    mollifier: MollifierSpec = field(default_factory=MollifierSpec)
    delta: float = 0.1
    kind = "mollified"

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta!r}")
        if isinstance(self.base, Mollified):
            raise ValueError("mollifying a mollified field is not supported")

    @property
    def horizon(self) -> float:
        return self.base.horizon

    def _pieces(self):
        out = []
        for p in self.base.pieces:
            try:
                f = p.field.mollify(self.mollifier, self.delta)
            except NotImplementedError:
                f = QuadratureMollifiedPiece(p.field, self.mollifier, self.delta)
            out.append(Piece(p.start, p.end, f))
        return out

    def eval_quadrature(self, t: float, x1, x2):
        """Independent route: the fixed product rule applied to the base field."""
        return QuadratureMollifiedPiece(self.base.piece_at(t), self.mollifier, self.delta).eval(x1, x2)

    def describe(self):
        return {"kind": self.kind, "delta": self.delta, "base": self.base.describe()}


def build_dyadic_exchange(n_min: int = 1, n_max: int = 4, horizon: float = 1.0, orientation: str = "xy") -> DyadicExchange:
    return DyadicExchange(n_min=n_min, n_max=n_max, orientation=orientation, horizon=horizon)


def default_n_max(grid: TorusGrid) -> int:
    return grid.log2 - 2


def mollify(spec: VelocityField, mollifier: MollifierSpec | None = None, delta: float = 0.1) -> Mollified:
    return Mollified(spec, mollifier or MollifierSpec(), delta)


def eval_velocity(spec: VelocityField, t: float, x1, x2):
    return spec.eval(t, x1, x2)


def lipschitz_bound(spec: Mollified) -> float:
    """Certified ``int ||grad (b * w^delta)||_inf dt`` budget from Young's
    inequality: ``||b||_{L1 L1} * max |grad w^delta|``."""
    if not isinstance(spec, Mollified):
        raise TypeError("lipschitz_bound expects a mollified field")
    return spec.base.l1l1_norm() * spec.mollifier.grad_max_scaled(spec.delta)


# ---------------------------------------------------------------------------
# Flows


def exact_flow(spec: VelocityField, s: float, t: float, x1, x2):
    """``X(s, t, x)``: position at time ``s`` of the characteristic through
    ``x`` at time ``t``, composed from closed-form shear flows."""
    if not spec.has_exact_flow:
        raise NoExactFlow(f"field {spec.kind!r} has no closed-form flow")
    y1 = np.mod(np.asarray(x1, dtype=float), 1.0)
    y2 = np.mod(np.asarray(x2, dtype=float), 1.0)
    y1, y2 = np.broadcast_arrays(y1, y2)
    if s == t:
        return y1.copy(), y2.copy()
    segs = spec.pieces_between(t, s)
    if s < t:
        segs = segs[::-1]
        sign = -1.0
    else:
        sign = 1.0
    for a, b, f in segs:
        y1, y2 = f.advance(sign * (b - a), y1, y2)
    return y1, y2


def _heun(piece, dt, y1, y2):
    k1 = piece.eval(y1, y2)
    p1 = y1 + dt * k1[0]
    p2 = y2 + dt * k1[1]
    k2 = piece.eval(p1, p2)
    return y1 + 0.5 * dt * (k1[0] + k2[0]), y2 + 0.5 * dt * (k1[1] + k2[1])


def _rk4(piece, dt, y1, y2):
    k1 = piece.eval(y1, y2)
    k2 = piece.eval(y1 + 0.5 * dt * k1[0], y2 + 0.5 * dt * k1[1])
    k3 = piece.eval(y1 + 0.5 * dt * k2[0], y2 + 0.5 * dt * k2[1])
    k4 = piece.eval(y1 + dt * k3[0], y2 + dt * k3[1])
    return (y1 + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            y2 + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


_STEPPERS = {"heun": _heun, "rk4": _rk4}


def trace_steps(piece, duration: float, theta: float = 0.25, refine: int = 1) -> int:
    """Explicit steps for one piece: ``L dt <= theta`` with ``L`` the piece's
    Lipschitz bound, times a refinement factor."""
    lip = piece.lipschitz()
    if not math.isfinite(lip):
        raise StepBudgetExceeded("non-Lipschitz piece cannot be traced")
    return max(1, int(math.ceil(abs(duration) * lip / theta))) * refine


def trace_flow(spec: VelocityField, s: float, t: float, x1, x2, *, method: str = "heun",
               theta: float = 0.25, refine: int = 1, max_steps: int = 1_000_000):
    """Numerical ``X(s, t, x)``.  Shear and zero pieces use their closed-form
    flow (an explicit one-step method is exact on them); other pieces are
    integrated with ``method`` at the Lipschitz step budget."""
    stepper = _STEPPERS[method]
    y1 = np.mod(np.asarray(x1, dtype=float), 1.0)
    y2 = np.mod(np.asarray(x2, dtype=float), 1.0)
    y1, y2 = np.broadcast_arrays(y1, y2)
    y1, y2 = y1.copy(), y2.copy()
    if s == t:
        return y1, y2
    segs = spec.pieces_between(t, s)
    sign = 1.0
    if s < t:
        segs = segs[::-1]
        sign = -1.0
    used = 0
    for a, b, f in segs:
        dur = sign * (b - a)
        if f.is_shear:
            y1, y2 = f.advance(dur, y1, y2)
            continue
        m = trace_steps(f, dur, theta, refine)
        used += m
        if used > max_steps:
            raise StepBudgetExceeded(f"tracing needs more than {max_steps} steps near t={a:g}")
        dt = dur / m
        for _ in range(m):
            y1, y2 = stepper(f, dt, y1, y2)
        y1 = np.mod(y1, 1.0)
        y2 = np.mod(y2, 1.0)
    return y1, y2


def flow(spec: VelocityField, s: float, t: float, x1, x2, **kw):
    if spec.has_exact_flow:
        return exact_flow(spec, s, t, x1, x2)
    return trace_flow(spec, s, t, x1, x2, **kw)


# ---------------------------------------------------------------------------
# Checkerboards


@dataclass(frozen=True)
class CheckerboardDatum:
    """``c_n(x) = (-1)^(floor(2^n x1) + floor(2^n x2))``."""

    n: int

    def __call__(self, x1, x2):
        s = 2.0**self.n
        i = np.floor(np.mod(np.asarray(x1, dtype=float), 1.0) * s).astype(np.int64)
        j = np.floor(np.mod(np.asarray(x2, dtype=float), 1.0) * s).astype(np.int64)
        return np.where((i + j) % 2 == 0, 1.0, -1.0)

    def sample(self, grid: TorusGrid) -> ScalarGridField:
        return checkerboard(self.n, grid)


def checkerboard(n: int, grid: TorusGrid) -> ScalarGridField:
    if n < 0 or grid.n_cells % (2 ** (n + 1)):
        raise ValueError(f"resolution insufficient: checkerboard c_{n} needs 2^{n + 1} | N (N={grid.n_cells})")
    return grid.sample(CheckerboardDatum(n))


def distance_to_dyadic_lines(n: int, x):
    """Distance from ``x`` to the nearest multiple of ``2^-n``."""
    s = 2.0**-n
    r = np.mod(np.asarray(x, dtype=float), s)
    return np.minimum(r, s - r)
