"""Feynman-Kac Monte Carlo for the forward and backward problems.

Paths solve ``dX = b dt + sqrt(2 nu) dW`` by Euler-Maruyama with steps
aligned to the field's breakpoints.  Forward quantities use paths run from
``t`` down to ``0``::

    rho(t, x) = E[rho_in(X_{t,0}(x))]

and backward quantities use paths run from ``t`` up to ``T``::

    theta(t, x) = int_t^T E[chi(s, X_{s,t}(x))] ds

Noise is counter based: particle ``p`` at step ``k`` reads the Philox block
with key ``(k, seed)`` and counter ``p``, so results do not depend on how
particles are chunked or scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .interp import interpolate
from .torus import ScalarGridField, SourceSpec
from .velocity import VelocityField

MIN_SAMPLES = 100
CHUNK = 1 << 15
_U53 = 1.0 / (1 << 53)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    samples: int

    def __post_init__(self):
        if self.samples < MIN_SAMPLES:
            raise ValueError(f"an estimate needs at least {MIN_SAMPLES} samples, got {self.samples}")

    def contains(self, value: float, k: float = 4.0, budget: float = 0.0) -> bool:
        return abs(self.mean - value) <= k * self.stderr + budget


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    positions: np.ndarray
    seed: int
    steps: int
    nu: float
    span: tuple[float, float]
    increment_mean: float = 0.0
    increment_var: float = 0.0
    increment_var_stderr: float = 0.0
    dt_sde: float = 0.0

    def __post_init__(self):
        p = np.mod(np.asarray(self.positions, dtype=float), 1.0)
        p.flags.writeable = False
        object.__setattr__(self, "positions", p)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    def noise_calibrated(self, k: float = 4.0) -> bool:
        """Empirical increment variance within ``k`` stderr of ``2 nu dt``."""
        target = 2.0 * self.nu * self.dt_sde
        return abs(self.increment_var - target) <= k * self.increment_var_stderr + 1e-300


def _gaussians(seed: int, step: int, p0: int, count: int) -> np.ndarray:
    """Two standard normals per particle ``p0 .. p0+count-1`` for one step."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, step & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=np.array([p0, 0, 0, 0], dtype=np.uint64))
    raw = bg.random_raw(4 * count).reshape(count, 4)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53  # (0, 1]
    u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * _U53
    r = np.sqrt(-2.0 * np.log(u1))
    return np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=1)


def step_schedule(spec: VelocityField, t_from: float, t_to: float, dt_sde: float | None = None):
    """Step times from ``t_from`` to ``t_to`` (either direction) whose
    lattice contains every field breakpoint in between."""
    lo, hi = min(t_from, t_to), max(t_from, t_to)
    span = hi - lo
    if span == 0:
        return np.array([t_from])
    if dt_sde is None:
        m = max(1, math.ceil(span / 0.005 - 1e-9))
        dt_sde = span / m
    m = span / dt_sde
    if abs(m - round(m)) > 1e-9 * max(1.0, m):
        raise ValueError(f"dt_sde={dt_sde!r} does not divide the span {span!r}")
    m = int(round(m))
    for b in spec.breakpoints():
        if lo < b < hi:
            q = (b - lo) / dt_sde
            if abs(q - round(q)) > 1e-9 * max(1.0, q):
                raise ValueError(f"dt_sde={dt_sde!r} is not aligned with the field breakpoint t={b!r}")
    grid = lo + span * np.arange(m + 1) / m
    return grid if t_to >= t_from else grid[::-1]


def _run(spec, nu, t_from, t_to, x0, seed, dt_sde, on_node: Callable | None = None):
    """Euler-Maruyama over the schedule; ``x0`` has shape ``(M, 2)``."""
    sched = step_schedule(spec, t_from, t_to, dt_sde)
    x = np.array(x0, dtype=float)
    m_paths = x.shape[0]
    amp = math.sqrt(2.0 * nu)
    s1 = s2 = 0.0
    sq = 0.0
    count = 0
    if on_node is not None:
        on_node(0, float(sched[0]), x)
    for k in range(1, sched.size):
        a, b = float(sched[k - 1]), float(sched[k])
        dt = abs(b - a)
        sign = 1.0 if b > a else -1.0
        piece = spec.piece_at(0.5 * (a + b))
        v1, v2 = piece.eval(x[:, 0], x[:, 1])
        x[:, 0] += sign * dt * v1
        x[:, 1] += sign * dt * v2
        if nu > 0:
            z = np.empty((m_paths, 2))
            for p0 in range(0, m_paths, CHUNK):
                n = min(CHUNK, m_paths - p0)
                z[p0:p0 + n] = _gaussians(seed, k, p0, n)
            inc = amp * math.sqrt(dt) * z
            x += inc
            s1 += float(np.sum(inc))
            sq_k = inc * inc
            s2 += float(np.sum(sq_k))
            sq += float(np.sum(sq_k * sq_k))
            count += inc.size
        np.mod(x, 1.0, out=x)
        if on_node is not None:
            on_node(k, b, x)
    if count:
        mean = s1 / count
        var = s2 / count
        var_sd = math.sqrt(max(sq / count - var * var, 0.0))
        stats_ = (mean, var, var_sd / math.sqrt(count))
    else:
        stats_ = (0.0, 0.0, 0.0)
    dt_used = float(abs(sched[1] - sched[0])) if sched.size > 1 else 0.0
    return x, sched, stats_, dt_used


def simulate_flow(spec: VelocityField, nu: float, t_from: float, t_to: float, x, M: int, seed: int,
                  dt_sde: float | None = None) -> ParticleCloud:
    """``M`` Euler-Maruyama paths from ``(t_from, x)`` to time ``t_to``."""
    if nu < 0:
        raise ValueError("nu must be >= 0")
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (M, 2))
    pos, sched, (m, v, vs), dt = _run(spec, nu, t_from, t_to, x0, seed, dt_sde)
    return ParticleCloud(pos, int(seed), int(sched.size - 1), nu, (t_from, t_to), m, v, vs, dt)


def _mc(values: np.ndarray) -> McEstimate:
    m = values.size
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if m > 1 else 0.0
    return McEstimate(mean, sd / math.sqrt(m), m)


def _datum_eval(rho_in, x1, x2):
    if isinstance(rho_in, ScalarGridField):
        return interpolate(rho_in.values, x1, x2, "cubic")
    return np.asarray(rho_in(x1, x2), dtype=float) * np.ones_like(x1)


def estimate_rho(spec: VelocityField, rho_in, nu: float, t: float, x, M: int, seed: int,
                 dt_sde: float | None = None) -> McEstimate:
    """``E[rho_in(X_{t,0}(x))]``; grid data are read by cubic interpolation."""
    if M < MIN_SAMPLES:
        raise ValueError(f"M={M} is below the minimum {MIN_SAMPLES}")
    if not 0 < t <= spec.horizon:
        raise ValueError(f"t={t!r} must lie in (0, T]")
    cloud = simulate_flow(spec, nu, t, 0.0, x, M, seed, dt_sde)
    return _mc(_datum_eval(rho_in, cloud.positions[:, 0], cloud.positions[:, 1]))


def estimate_theta(spec: VelocityField, chi, nu: float, t: float, x, M: int, seed: int,
                   dt_sde: float | None = None) -> McEstimate:
    """``int_t^T E[chi(s, X_{s,t}(x))] ds`` with the trapezoid rule on the
    SDE step times."""
    if M < MIN_SAMPLES:
        raise ValueError(f"M={M} is below the minimum {MIN_SAMPLES}")
    T = spec.horizon
    if not 0 <= t <= T:
        raise ValueError(f"t={t!r} must lie in [0, T]")
    sources = (chi,) if isinstance(chi, SourceSpec) else tuple(chi)
    if t == T:
        return McEstimate(0.0, 0.0, M)
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (M, 2))
    sched = step_schedule(spec, t, T, dt_sde)
    w = np.zeros(sched.size)
    d = np.diff(sched)
    w[:-1] += d / 2
    w[1:] += d / 2
    acc = np.zeros(M)

    def on_node(k, s, pos):
        for src in sources:
            a = float(src.time_profile(s))
            if a != 0.0:
                acc[:] += w[k] * a * src.space_profile(pos[:, 0], pos[:, 1])

    _run(spec, nu, t, T, x0, seed, dt_sde, on_node)
    return _mc(acc)


@dataclass(frozen=True)
class IncompressibilityResult:
    statistic: float
    quantile: float
    dof: int
    samples: int

    @property
    def passed(self) -> bool:
        return self.statistic < self.quantile


def incompressibility_check(spec: VelocityField, nu: float, span: tuple[float, float], M: int, seed: int,
                            bins: int = 8, dt_sde: float | None = None) -> IncompressibilityResult:
    """Flow a uniform lattice cloud over ``span`` and return the chi-square
    statistic of endpoint occupancy on a ``bins x bins`` partition.

    The start cloud is the ``L x L`` lattice of cell centres with
    ``L = bins * 2^k`` the smallest such that ``L^2 >= M``; dyadic
    translations then permute the lattice.
    """
    if M < 10_000:
        raise ValueError(f"M={M} is below the minimum 10^4")
    if M < 10 * bins * bins:
        raise ValueError(f"undersampled: M={M} < 10 * bins^2 = {10 * bins * bins}")
    side = bins
    while side * side < M:
        side *= 2
    axis = (np.arange(side) + 0.5) / side
    a1, a2 = np.meshgrid(axis, axis, indexing="ij")
    x0 = np.stack([a1.ravel(), a2.ravel()], axis=1)
    pos, _, _, _ = _run(spec, nu, span[0], span[1], x0, seed, dt_sde)
    idx = np.minimum((pos * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx[:, 0] * bins + idx[:, 1], minlength=bins * bins)
    expected = x0.shape[0] / bins**2
    stat = float(np.sum((counts - expected) ** 2) / expected)
    dof = bins * bins - 1
    return IncompressibilityResult(stat, float(stats.chi2.ppf(0.999, dof)), dof, int(x0.shape[0]))
