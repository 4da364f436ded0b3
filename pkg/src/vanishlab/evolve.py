"""Forward and backward advection-diffusion solvers on the torus.

Forward problem::

    d_t rho + div(b rho) - nu Lap rho = 0,   rho(0) = rho_in

Backward problem (zero terminal data, source ``chi``)::

    d_t theta + div(b theta) + nu Lap theta + chi = 0,   theta(T) = 0

The backward problem is solved in the reversed time ``tau = T - t``, where
it becomes a forward advection-diffusion along ``-b(T - tau)`` with source.

Schemes
-------
``splitting``
    Strang splitting ``D(dt/2) A(dt) D(dt/2)``: semi-Lagrangian advection
    with exact (or traced) departure points and an exact-in-time diffusion
    semigroup.
``spectral-galerkin``
    Pseudo-spectral advection with RK4 inside the same splitting; every step
    is linear, which is what the exact discrete adjoint needs.
``characteristics``
    Pure transport (``nu = 0``) by composing the datum with the flow map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .interp import interpolate
from .torus import ScalarGridField, SourceSpec, TorusGrid
from .velocity import Mollified, MollifierSpec, VelocityField, flow, mollify, trace_flow

SCHEMES = ("splitting", "spectral-galerkin", "characteristics")
INTERPOLATIONS = ("monotone-bilinear", "cubic")
DIFFUSIONS = ("auto", "spectral", "discrete")

ENERGY_SLACK = 1e-8
BOUND_SLACK = 1e-12
MASS_TOL = 1e-10


class NumericalAbort(RuntimeError):
    """A solve produced non-finite values; carries where it happened."""

    def __init__(self, module: str, operation: str, time: float, detail: str = ""):
        self.module = module
        self.operation = operation
        self.time = time
        msg = f"{module}.{operation}: non-finite values at time node t={time!r}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# Time nodes


def _merge(points, tol=1e-13):
    pts = sorted(float(p) for p in points)
    out = []
    for p in pts:
        if not out or p - out[-1] > tol:
            out.append(p)
    return out


def source_breakpoints(sources) -> list[float]:
    out = []
    for s in _as_sources(sources):
        out.extend(s.time_support)
    return out


def build_time_nodes(spec: VelocityField, grid: TorusGrid, cfl: float = 1.0, *,
                     extra: Sequence[float] = (), max_dt: float | None = None,
                     horizon: float | None = None) -> np.ndarray:
    """Nodes containing ``0``, ``T``, every field breakpoint and ``extra``.

    Each interval ``J`` between consecutive mandatory points is split into
    ``max(2, ceil(|J| sup_J |b| / (cfl h)))`` equal steps (more if
    ``max_dt`` asks for it).  For the dyadic-exchange field with ``cfl = 1``
    every advection step is an exact whole-cell shift.
    """
    T = spec.horizon if horizon is None else horizon
    if not 0 < cfl <= 1:
        raise ValueError(f"cfl must lie in (0, 1], got {cfl!r}")
    marks = [0.0, T] + [b for b in spec.breakpoints() if b < T] + [e for e in extra if 0 < e < T]
    marks = _merge(marks)
    nodes = [marks[0]]
    for a, b in zip(marks[:-1], marks[1:]):
        length = b - a
        sup = spec.sup_norm(a, b)
        m = max(2, math.ceil(length * sup / (cfl * grid.h) - 1e-9))
        if max_dt is not None:
            m = max(m, math.ceil(length / max_dt - 1e-9))
        nodes.extend(a + length * np.arange(1, m) / m)
        nodes.append(b)
    return np.array(nodes)


# ---------------------------------------------------------------------------
# Configuration and results


@dataclass(frozen=True, eq=False)
class SolveConfig:
    """Discretisation parameters for one solve."""

    nu: float
    grid: TorusGrid
    time_nodes: np.ndarray
    scheme: str = "splitting"
    interpolation: str = "monotone-bilinear"
    cfl: float = 1.0
    diffusion: str = "auto"
    output_times: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.nu >= 0 and math.isfinite(self.nu)):
            raise ValueError(f"nu must be finite and >= 0, got {self.nu!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}, got {self.interpolation!r}")
        if self.diffusion not in DIFFUSIONS:
            raise ValueError(f"diffusion must be one of {DIFFUSIONS}, got {self.diffusion!r}")
        if not 0 < self.cfl <= 1:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl!r}")
        t = np.array(self.time_nodes, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must be strictly increasing and start at 0")
        t.flags.writeable = False
        object.__setattr__(self, "time_nodes", t)
        if self.output_times is None:
            object.__setattr__(self, "output_times", (0.0, float(t[-1])))
        else:
            outs = tuple(float(x) for x in self.output_times)
            missing = [x for x in outs if not np.any(t == x)]
            if missing:
                raise ValueError(f"output times {missing} are not time nodes")
            object.__setattr__(self, "output_times", tuple(sorted(set(outs))))

    @classmethod
    def build(cls, spec: VelocityField, grid: TorusGrid, nu: float, *, cfl: float = 1.0,
              output_times: Sequence[float] = (), sources=(), max_dt: float | None = None,
              **kw) -> "SolveConfig":
        """Config whose nodes honour the CFL rule and contain every output
        time and source support boundary."""
        extra = list(output_times) + source_breakpoints(sources)
        nodes = build_time_nodes(spec, grid, cfl, extra=extra, max_dt=max_dt)
        outs = [nodes[np.argmin(np.abs(nodes - o))] for o in output_times] or None
        return cls(nu=nu, grid=grid, time_nodes=nodes, cfl=cfl, output_times=outs, **kw)

    @property
    def horizon(self) -> float:
        return float(self.time_nodes[-1])

    @property
    def diffusion_operator(self) -> str:
        if self.diffusion != "auto":
            return self.diffusion
        # the discrete-Laplacian semigroup has a positive kernel; the spectral one does not
        return "discrete" if self.interpolation == "monotone-bilinear" else "spectral"

    def validate_for(self, spec: VelocityField):
        T = self.horizon
        if abs(T - spec.horizon) > 1e-12:
            raise ValueError(f"last time node {T} differs from the field horizon {spec.horizon}")
        nodes = self.time_nodes
        for b in spec.breakpoints():
            if not np.any(np.abs(nodes - b) <= 1e-13):
                raise ValueError(f"time nodes miss the field breakpoint t={b!r}")
        h = self.grid.h
        for a, b in zip(nodes[:-1], nodes[1:]):
            sup = spec.sup_norm(a, b)
            if (b - a) * sup > self.cfl * h * (1 + 1e-9):
                raise ValueError(
                    f"CFL budget violated on ({a:g}, {b:g}]: dt*sup|b| = {(b - a) * sup:.3e} > cfl*h = {self.cfl * h:.3e}")

    def echo(self) -> dict:
        return {
            "nu": self.nu,
            "n_cells": self.grid.n_cells,
            "scheme": self.scheme,
            "interpolation": self.interpolation,
            "diffusion": self.diffusion_operator,
            "cfl": self.cfl,
            "n_time_nodes": int(self.time_nodes.size),
            "output_times": list(self.output_times),
        }


@dataclass
class EnergyLedger:
    """Per-node energy bookkeeping.

    ``grad_energy_cum`` is ``2 nu int ||grad u||^2`` accumulated exactly over
    each diffusion sub-step from the operator's own symbol;
    ``h1_sq`` is the spectral ``||grad u||^2`` of the state at each node.
    For backward runs, accumulation runs from ``T`` downward and
    ``source_work_cum`` holds ``2 int <theta, chi>``.
    """

    times: np.ndarray
    l2_sq: np.ndarray
    h1_sq: np.ndarray
    grad_energy_cum: np.ndarray
    source_work_cum: np.ndarray

    def energy_inequality_holds(self, slack: float = ENERGY_SLACK) -> bool:
        e0 = self.l2_sq[0]
        return bool(np.all(self.l2_sq + self.grad_energy_cum <= e0 + slack * e0 + 1e-300))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("times", "l2_sq", "h1_sq", "grad_energy_cum", "source_work_cum")}


@dataclass
class Trajectory:
    """Snapshots at output times plus a per-node ledger.

    Snapshots are stored in solve order: increasing time for forward runs,
    decreasing time for backward runs, so the first snapshot is always the
    supplied datum.
    """

    times: list[float]
    snapshots: list[ScalarGridField]
    ledger: EnergyLedger
    config: dict
    field: dict
    direction: str = "forward"
    probes: np.ndarray | None = None
    checks: dict = field(default_factory=dict)

    def at(self, t: float) -> ScalarGridField:
        for s, f in zip(self.times, self.snapshots):
            if abs(s - t) <= 1e-13:
                return f
        raise KeyError(f"no snapshot at t={t!r}")

    @property
    def final(self) -> ScalarGridField:
        return self.snapshots[-1]

    @property
    def grid(self) -> TorusGrid:
        return self.snapshots[0].grid


# ---------------------------------------------------------------------------
# Building blocks


def _as_sources(sources) -> tuple[SourceSpec, ...]:
    if sources is None:
        return ()
    if isinstance(sources, SourceSpec):
        return (sources,)
    return tuple(sources)


def _as_field(datum, grid: TorusGrid) -> ScalarGridField:
    if isinstance(datum, ScalarGridField):
        if datum.grid != grid:
            raise ValueError("datum grid does not match the solve grid")
        return datum
    return grid.sample(datum)


class _SourceSampler:
    """``chi(t, .)`` on the grid as a sum of separable bumps."""

    def __init__(self, sources, grid: TorusGrid):
        self.sources = _as_sources(sources)
        self.profiles = [s.sample_space(grid) for s in self.sources]
        self.grid = grid

    def __call__(self, t: float) -> np.ndarray:
        out = np.zeros((self.grid.n_cells,) * 2)
        for s, p in zip(self.sources, self.profiles):
            a = float(s.time_profile(t))
            if a != 0.0:
                out += a * p
        return out

    def sup_integral_bound(self) -> float:
        return sum(s.sup_time_integral() for s in self.sources)

    def l2_sq_from(self, t: float) -> float:
        # triangle inequality for sums of sources
        return sum(math.sqrt(s.l2_sq_from(t)) for s in self.sources) ** 2


class _Diffusion:
    """Exact-in-time heat semigroup ``exp(tau nu L)`` in Fourier space."""

    def __init__(self, grid: TorusGrid, nu: float, operator: str):
        n = grid.n_cells
        k1 = np.fft.fftfreq(n, d=1.0 / n)[:, None]
        k2 = np.fft.rfftfreq(n, d=1.0 / n)[None, :]
        if operator == "spectral":
            self.symbol = (2 * np.pi) ** 2 * (k1**2 + k2**2)
        else:
            h = grid.h
            self.symbol = 4.0 / h**2 * (np.sin(np.pi * k1 * h) ** 2 + np.sin(np.pi * k2 * h) ** 2)
        self.spectral_symbol = (2 * np.pi) ** 2 * (k1**2 + k2**2)
        wt = np.full(k2.shape, 2.0)
        wt[0, 0] = 1.0
        if n % 2 == 0:
            wt[0, -1] = 1.0
        self.weight = wt / float(n) ** 4
        self.nu = nu
        self.n = n
        self._cache: dict[float, np.ndarray] = {}

    def step(self, u: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
        """Apply the semigroup; return the new state and the exact energy
        ``2 nu int ||grad u||^2`` dissipated over the sub-step."""
        if self.nu == 0.0 or tau == 0.0:
            return u, 0.0
        mult = self._cache.get(tau)
        if mult is None:
            mult = np.exp(-self.nu * self.symbol * tau)
            self._cache[tau] = mult
        c = np.fft.rfft2(u)
        loss = float(np.sum(self.weight * np.abs(c) ** 2 * (1.0 - mult**2)))
        return np.fft.irfft2(c * mult, s=u.shape), loss

    def h1_sq(self, u: np.ndarray) -> float:
        c = np.fft.rfft2(u)
        return float(np.sum(self.weight * self.spectral_symbol * np.abs(c) ** 2))


def _l2_sq(u: np.ndarray) -> float:
    return float(np.vdot(u, u)) / u.size


class _SemiLagrangian:
    """Advection over one node interval by interpolation at departure points."""

    def __init__(self, spec: VelocityField, grid: TorusGrid, mode: str, trace_method: str = "rk4"):
        self.spec = spec
        self.x1, self.x2 = grid.centers()
        self.mode = mode
        self.trace_method = trace_method
        self._cache: dict = {}

    def departure(self, s: float, t: float):
        """``X(s, t, x)`` at cell centres for a single node interval."""
        segs = self.spec.pieces_between(t, s)
        key = (tuple(id(f) for _, _, f in segs), round(t - s, 15))
        hit = self._cache.get(key)
        if hit is None:
            hit = flow(self.spec, s, t, self.x1, self.x2, method=self.trace_method)
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def step(self, u: np.ndarray, s: float, t: float) -> np.ndarray:
        d1, d2 = self.departure(s, t)
        return _restore_mean(interpolate(u, d1, d2, self.mode), u)


def _restore_mean(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Return ``v`` with the mean of ``u`` restored.

    Interpolation at traced feet conserves the mean only up to the trace
    error.  The deficit is put back with weights ``max u - v`` (or
    ``v - min u``), whose mean is at least the deficit, so values that lie
    in ``[min u, max u]`` stay there.
    """
    d = float(np.mean(u) - np.mean(v))
    if d == 0.0:
        return v
    w = (float(u.max()) - v) if d > 0 else (v - float(u.min()))
    mw = float(np.mean(w))
    if mw <= 0.0:
        return v + d
    return v + (d / mw) * w


class _PseudoSpectral:
    """``A rho = -div(b rho)`` with spectral derivatives (Nyquist derivative
    set to zero, so each derivative matrix is exactly antisymmetric)."""

    def __init__(self, spec: VelocityField, grid: TorusGrid):
        n = grid.n_cells
        k = np.fft.fftfreq(n, d=1.0 / n)
        k[n // 2] = 0.0
        self.ik1 = (2j * np.pi * k)[:, None]
        self.ik2 = (2j * np.pi * np.fft.rfftfreq(n, d=1.0 / n))[None, :].copy()
        self.ik2[0, -1] = 0.0
        self.spec = spec
        self.x1, self.x2 = grid.centers()
        self.shape = (n, n)
        self._cache: dict = {}

    def velocity(self, s: float, t: float):
        piece = self.spec.piece_at(0.5 * (s + t))
        key = id(piece)
        hit = self._cache.get(key)
        if hit is None:
            hit = piece.eval(self.x1, self.x2)
            self._cache[key] = hit
        return hit

    def _d(self, u):
        c = np.fft.rfft2(u)
        return (np.fft.irfft2(self.ik1 * c, s=self.shape), np.fft.irfft2(self.ik2 * c, s=self.shape))

    def apply(self, u, b):
        c1 = np.fft.rfft2(b[0] * u)
        c2 = np.fft.rfft2(b[1] * u)
        return -np.fft.irfft2(self.ik1 * c1 + self.ik2 * c2, s=self.shape)

    def apply_transpose(self, u, b):
        d1, d2 = self._d(u)
        return b[0] * d1 + b[1] * d2

    @staticmethod
    def rk4(op, u, tau):
        k1 = op(u)
        k2 = op(u + 0.5 * tau * k1)
        k3 = op(u + 0.5 * tau * k2)
        k4 = op(u + tau * k3)
        return u + tau / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def step(self, u, s, t, transpose: bool = False):
        b = self.velocity(s, t)
        op = (lambda v: self.apply_transpose(v, b)) if transpose else (lambda v: self.apply(v, b))
        return self.rk4(op, u, t - s)


def _check_finite(u, op, t):
    if not np.all(np.isfinite(u)):
        raise NumericalAbort("evolve", op, float(t))


def _probe_values(u: np.ndarray, probes) -> np.ndarray | None:
    if probes is None:
        return None
    return np.array([float(np.vdot(u, p)) / u.size for p in probes])


# ---------------------------------------------------------------------------
# Forward solves


def _forward_checks(traj: Trajectory, rho0: ScalarGridField, config: SolveConfig, monotone: bool):
    v0 = rho0.values
    lo, hi = float(v0.min()), float(v0.max())
    scale = max(abs(rho0.mean()), float(np.max(np.abs(v0))), 1e-300)
    slack = BOUND_SLACK * scale
    traj.checks["max_principle"] = (
        bool(all(s.values.min() >= lo - slack and s.values.max() <= hi + slack for s in traj.snapshots))
        if monotone else None)
    traj.checks["mass"] = bool(all(abs(s.mean() - rho0.mean()) <= MASS_TOL * scale for s in traj.snapshots))
    traj.checks["energy_inequality"] = traj.ledger.energy_inequality_holds()


def solve_forward(spec: VelocityField, rho_in, config: SolveConfig, *, probes=None) -> Trajectory:
    """Solve the forward problem on ``config.time_nodes``.

    ``rho_in`` is a grid field or a closed-form datum (callable of
    ``(x1, x2)``); the characteristics scheme evaluates closed-form data
    exactly at departure points.  ``probes`` is an optional list of grid
    arrays ``w``; the pairing ``<u, w>`` is recorded at every node.
    """
    grid = config.grid
    rho0 = _as_field(rho_in, grid)
    if config.nu == 0.0 and not spec.has_exact_flow and config.scheme != "spectral-galerkin":
        raise ValueError("pure transport (nu = 0) is only available for fields with a closed-form flow")
    if config.scheme == "characteristics" and config.nu != 0.0:
        raise ValueError("the characteristics scheme is pure transport: it needs nu = 0")
    config.validate_for(spec)
    nodes = config.time_nodes
    outs = set(config.output_times)
    monotone = config.interpolation == "monotone-bilinear" and config.scheme != "spectral-galerkin"

    diff = _Diffusion(grid, config.nu, config.diffusion_operator)
    n_nodes = nodes.size
    l2 = np.zeros(n_nodes)
    h1 = np.zeros(n_nodes)
    cum = np.zeros(n_nodes)
    probe_rows = []
    times, snaps = [], []

    u = np.array(rho0.values)

    def record(k, u):
        l2[k] = _l2_sq(u)
        h1[k] = diff.h1_sq(u)
        pv = _probe_values(u, probes)
        if pv is not None:
            probe_rows.append(pv)
        if float(nodes[k]) in outs:
            times.append(float(nodes[k]))
            snaps.append(rho0 if k == 0 else ScalarGridField(grid, u))

    record(0, u)
    if config.scheme == "characteristics":
        x1, x2 = grid.centers()
        exact = not isinstance(rho_in, ScalarGridField)
        for k in range(1, n_nodes):
            d1, d2 = flow(spec, 0.0, float(nodes[k]), x1, x2)
            u = rho_in(d1, d2) if exact else interpolate(rho0.values, d1, d2, config.interpolation)
            u = np.asarray(u, dtype=float)
            _check_finite(u, "solve_forward", nodes[k])
            record(k, u)
    else:
        if config.scheme == "splitting":
            adv = _SemiLagrangian(spec, grid, config.interpolation)
            advect = adv.step
        else:
            adv = _PseudoSpectral(spec, grid)
            advect = adv.step
        total = 0.0
        for k in range(n_nodes - 1):
            s, t = float(nodes[k]), float(nodes[k + 1])
            half = 0.5 * (t - s)
            u, e1 = diff.step(u, half)
            u = advect(u, s, t)
            u, e2 = diff.step(u, half)
            total += e1 + e2
            cum[k + 1] = total
            _check_finite(u, "solve_forward", t)
            record(k + 1, u)

    ledger = EnergyLedger(nodes.copy(), l2, h1, cum, np.zeros(n_nodes))
    traj = Trajectory(times, snaps, ledger, config.echo(), spec.describe(), "forward",
                      np.array(probe_rows) if probes is not None else None)
    _forward_checks(traj, rho0, config, monotone)
    return traj


def solve_backward_diffusive(spec: VelocityField, chi, nu: float, config: SolveConfig | None = None) -> Trajectory:
    """Solve the backward problem by time reversal.

    One reversed step from ``t_b`` down to ``t_a`` is the symmetric
    trapezoid ``theta <- L(theta + dt/2 chi(t_b)) + dt/2 chi(t_a)`` where
    ``L`` is the split advection-diffusion step along the reversed field.
    """
    if config is None:
        raise ValueError("a SolveConfig is required")
    if nu <= 0 and not spec.has_exact_flow:
        raise ValueError("nu must be > 0 for fields without a closed-form flow")
    if config.scheme == "characteristics":
        raise ValueError("the backward diffusive solver needs the splitting or spectral-galerkin scheme")
    config.validate_for(spec)
    grid = config.grid
    nodes = config.time_nodes
    n_nodes = nodes.size
    src = _SourceSampler(chi, grid)
    outs = set(config.output_times)
    diff = _Diffusion(grid, nu, config.diffusion_operator)
    if config.scheme == "splitting":
        adv = _SemiLagrangian(spec, grid, config.interpolation)

        def advect(u, s, t):
            # theta(s, x) = theta(t, X(t, s, x)): departure points lie ahead in time
            return adv.step(u, t, s)
    else:
        ps = _PseudoSpectral(spec, grid)

        def advect(u, s, t):
            # reversed-time transport d_tau theta = b . grad theta
            return ps.step(u, s, t, transpose=True)

    l2 = np.zeros(n_nodes)
    h1 = np.zeros(n_nodes)
    cum = np.zeros(n_nodes)
    work = np.zeros(n_nodes)
    times, snaps = [], []
    u = np.zeros((grid.n_cells,) * 2)
    chi_b = src(float(nodes[-1]))

    def record(k, u):
        l2[k] = _l2_sq(u)
        h1[k] = diff.h1_sq(u)
        if float(nodes[k]) in outs:
            times.append(float(nodes[k]))
            snaps.append(ScalarGridField(grid, u))

    record(n_nodes - 1, u)
    total = 0.0
    wsum = 0.0
    for k in range(n_nodes - 2, -1, -1):
        s, t = float(nodes[k]), float(nodes[k + 1])
        dt = t - s
        chi_a = src(s)
        ip_b = float(np.vdot(u, chi_b)) / u.size
        u = u + 0.5 * dt * chi_b
        u, e1 = diff.step(u, 0.5 * dt)
        u = advect(u, s, t)
        u, e2 = diff.step(u, 0.5 * dt)
        u = u + 0.5 * dt * chi_a
        total += e1 + e2
        ip_a = float(np.vdot(u, chi_a)) / u.size
        wsum += dt * (ip_a + ip_b)
        cum[k] = total
        work[k] = wsum
        _check_finite(u, "solve_backward_diffusive", s)
        record(k, u)
        chi_b = chi_a

    ledger = EnergyLedger(nodes.copy(), l2, h1, cum, work)
    echo = config.echo()
    echo["nu"] = nu
    traj = Trajectory(times, snaps, ledger, echo, spec.describe(), "backward")
    _backward_checks(traj, src, config.horizon)
    return traj


def _backward_checks(traj: Trajectory, src: _SourceSampler, horizon: float):
    bound = src.sup_integral_bound()
    sup = max(float(np.max(np.abs(s.values))) for s in traj.snapshots)
    traj.checks["sup_bound"] = bool(sup <= bound * (1 + 1e-10) + 1e-300)
    traj.checks["sup_value"] = sup
    traj.checks["sup_bound_value"] = bound
    led = traj.ledger
    ok = True
    for k, t in enumerate(led.times):
        rhs = 4.0 * horizon * src.l2_sq_from(float(t))
        if led.l2_sq[k] + led.grad_energy_cum[k] > rhs * (1 + 1e-10) + 1e-300:
            ok = False
    traj.checks["energy_bound"] = ok


# ---------------------------------------------------------------------------
# Exact discrete adjoint


@dataclass
class AdjointPair:
    forward: Trajectory
    backward: Trajectory
    lhs: float
    rhs: float
    scale: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def rel_gap(self) -> float:
        return self.gap / self.scale if self.scale > 0 else self.gap


def adjoint_mode_pair(spec: VelocityField, rho_in, chi, nu: float, config: SolveConfig) -> AdjointPair:
    """Forward solve plus its exact algebraic transpose.

    With one-step maps ``S_n`` and trapezoid weights ``w_n`` the discrete
    duality reads ``sum_n w_n <rho_n, chi_n> = <rho_0, theta_0>`` where
    ``theta_N = w_N chi_N`` and ``theta_n = w_n chi_n + S_n^T theta_{n+1}``.
    Each ``S_n = D(tau/2) P(tau A) D(tau/2)`` with ``P`` the RK4 polynomial
    and a time-constant ``A``, so ``S_n^T = D(tau/2) P(tau A^T) D(tau/2)``.
    """
    if config.scheme != "spectral-galerkin":
        raise ValueError("adjoint mode needs the linear spectral-galerkin scheme; "
                         "the monotone-limited interpolation cannot be transposed exactly")
    config.validate_for(spec)
    grid = config.grid
    rho0 = _as_field(rho_in, grid)
    nodes = config.time_nodes
    n_nodes = nodes.size
    src = _SourceSampler(chi, grid)
    diff = _Diffusion(grid, nu, "spectral")
    ps = _PseudoSpectral(spec, grid)
    w = np.zeros(n_nodes)
    dts = np.diff(nodes)
    w[:-1] += dts / 2
    w[1:] += dts / 2

    fwd_cfg = SolveConfig(nu, grid, nodes, "spectral-galerkin", config.interpolation, config.cfl,
                          "spectral", config.output_times)
    outs = set(config.output_times)

    u = np.array(rho0.values)
    lhs_terms = np.zeros(n_nodes)
    l2 = np.zeros(n_nodes)
    h1 = np.zeros(n_nodes)
    cum = np.zeros(n_nodes)
    times, snaps = [], []
    total = 0.0
    for k in range(n_nodes):
        if k > 0:
            s, t = float(nodes[k - 1]), float(nodes[k])
            u, e1 = diff.step(u, 0.5 * (t - s))
            u = ps.step(u, s, t)
            u, e2 = diff.step(u, 0.5 * (t - s))
            total += e1 + e2
            _check_finite(u, "adjoint_mode_pair", t)
        cum[k] = total
        l2[k] = _l2_sq(u)
        h1[k] = diff.h1_sq(u)
        lhs_terms[k] = w[k] * float(np.vdot(u, src(float(nodes[k])))) / u.size
        if float(nodes[k]) in outs:
            times.append(float(nodes[k]))
            snaps.append(rho0 if k == 0 else ScalarGridField(grid, u))
    fwd = Trajectory(times, snaps, EnergyLedger(nodes.copy(), l2, h1, cum, np.zeros(n_nodes)),
                     fwd_cfg.echo(), spec.describe(), "forward")
    _forward_checks(fwd, rho0, fwd_cfg, False)

    chi_norms = np.zeros(n_nodes)
    th = w[-1] * src(float(nodes[-1]))
    chi_norms[-1] = math.sqrt(_l2_sq(src(float(nodes[-1]))))
    bl2 = np.zeros(n_nodes)
    bh1 = np.zeros(n_nodes)
    bl2[-1] = _l2_sq(th)
    bh1[-1] = diff.h1_sq(th)
    btimes, bsnaps = [], []
    if float(nodes[-1]) in outs:
        btimes.append(float(nodes[-1]))
        bsnaps.append(ScalarGridField(grid, th))
    for k in range(n_nodes - 2, -1, -1):
        s, t = float(nodes[k]), float(nodes[k + 1])
        th, _ = diff.step(th, 0.5 * (t - s))
        th = ps.step(th, s, t, transpose=True)
        th, _ = diff.step(th, 0.5 * (t - s))
        c = src(s)
        chi_norms[k] = math.sqrt(_l2_sq(c))
        th = th + w[k] * c
        _check_finite(th, "adjoint_mode_pair", s)
        bl2[k] = _l2_sq(th)
        bh1[k] = diff.h1_sq(th)
        if s in outs:
            btimes.append(s)
            bsnaps.append(ScalarGridField(grid, th))
    bwd = Trajectory(btimes, bsnaps, EnergyLedger(nodes.copy(), bl2, bh1, np.zeros(n_nodes), np.zeros(n_nodes)),
                     fwd_cfg.echo(), spec.describe(), "backward")
    lhs = float(np.sum(lhs_terms))
    rhs = float(np.vdot(rho0.values, th)) / th.size
    scale = math.sqrt(_l2_sq(rho0.values)) * float(np.sum(w * chi_norms))
    return AdjointPair(fwd, bwd, lhs, rhs, scale)


# ---------------------------------------------------------------------------
# Regularised (mollified) problems by characteristics


def _regularized_field(spec, mollifier, delta) -> VelocityField:
    if isinstance(spec, Mollified):
        return spec
    return mollify(spec, mollifier or MollifierSpec(), delta)


def solve_forward_regularized(spec: VelocityField, mollifier: MollifierSpec | None, delta: float,
                              rho_in, output_times: Sequence[float], *, grid: TorusGrid | None = None,
                              method: str = "heun", theta: float = 0.25, refine: int = 1,
                              max_steps: int = 1_000_000) -> Trajectory:
    """``rho^delta(t, x) = rho_in(X^delta(0, t, x))`` by backward tracing.

    Grid data are evaluated at feet of characteristics by monotone bilinear
    interpolation, so the sup bound holds by construction; closed-form data
    are evaluated exactly.
    """
    field_ = _regularized_field(spec, mollifier, delta)
    if isinstance(rho_in, ScalarGridField):
        grid = rho_in.grid
    elif grid is None:
        raise ValueError("a grid is required for closed-form data")
    rho0 = _as_field(rho_in, grid)
    x1, x2 = grid.centers()
    times, snaps = [], []
    outs = sorted(float(t) for t in output_times)
    for t in outs:
        if t < 0 or t > field_.horizon:
            raise ValueError(f"output time {t} outside [0, T]")
        if t == 0.0:
            u = rho0.values
        else:
            d1, d2 = trace_flow(field_, 0.0, t, x1, x2, method=method, theta=theta, refine=refine,
                                max_steps=max_steps)
            if isinstance(rho_in, ScalarGridField):
                u = interpolate(rho0.values, d1, d2, "monotone-bilinear")
            else:
                u = np.asarray(rho_in(d1, d2), dtype=float)
        _check_finite(u, "solve_forward_regularized", t)
        times.append(t)
        snaps.append(rho0 if t == 0.0 else ScalarGridField(grid, u))
    tt = np.array(times)
    l2 = np.array([_l2_sq(s.values) for s in snaps])
    diff = _Diffusion(grid, 0.0, "spectral")
    h1 = np.array([diff.h1_sq(s.values) for s in snaps])
    ledger = EnergyLedger(tt, l2, h1, np.zeros_like(tt), np.zeros_like(tt))
    traj = Trajectory(times, snaps, ledger, {"delta": delta, "method": method, "refine": refine,
                                             "n_cells": grid.n_cells}, field_.describe(), "forward")
    v = rho0.values
    traj.checks["sup_bound"] = bool(all(np.max(np.abs(s.values)) <= np.max(np.abs(v)) * (1 + BOUND_SLACK)
                                        for s in snaps)) if isinstance(rho_in, ScalarGridField) else None
    return traj


def regularized_nodes(horizon: float, breakpoints: Sequence[float], steps: int) -> np.ndarray:
    """Uniform nodes of ``steps`` intervals on ``[0, T]`` merged with breakpoints."""
    base = np.linspace(0.0, horizon, steps + 1)
    return np.array(_merge(list(base) + [b for b in breakpoints if 0 < b < horizon]))


def solve_backward_regularized(spec: VelocityField, mollifier: MollifierSpec | None, delta: float,
                               chi, output_times: Sequence[float], *, grid: TorusGrid,
                               time_nodes: np.ndarray | None = None, steps: int = 256,
                               method: str = "heun", theta: float = 0.25, refine: int = 1,
                               max_steps: int = 1_000_000) -> Trajectory:
    """``theta^delta(t, x) = int_t^T chi(s, X^delta(s, t, x)) ds`` with the
    trapezoid rule on ``time_nodes`` along forward traces from ``(t, x)``."""
    field_ = _regularized_field(spec, mollifier, delta)
    T = field_.horizon
    srcs = _as_sources(chi)
    if time_nodes is None:
        time_nodes = regularized_nodes(T, field_.breakpoints() + source_breakpoints(srcs), steps)
    nodes = np.asarray(time_nodes, dtype=float)
    x1, x2 = grid.centers()
    times, snaps = [], []
    for t in sorted((float(t) for t in output_times), reverse=True):
        if t < 0 or t > T:
            raise ValueError(f"output time {t} outside [0, T]")
        s_nodes = np.array(_merge([t] + [s for s in nodes if s > t]))
        acc = np.zeros_like(x1)
        if s_nodes.size >= 2:
            y1, y2 = x1.copy(), x2.copy()
            wts = np.zeros(s_nodes.size)
            d = np.diff(s_nodes)
            wts[:-1] += d / 2
            wts[1:] += d / 2
            for k, s in enumerate(s_nodes):
                if k > 0:
                    y1, y2 = trace_flow(field_, float(s), float(s_nodes[k - 1]), y1, y2, method=method,
                                        theta=theta, refine=refine, max_steps=max_steps)
                for src in srcs:
                    a = float(src.time_profile(s))
                    if a != 0.0:
                        acc += wts[k] * a * src.space_profile(y1, y2)
        _check_finite(acc, "solve_backward_regularized", t)
        times.append(t)
        snaps.append(ScalarGridField(grid, acc))
    tt = np.array(times)
    l2 = np.array([_l2_sq(s.values) for s in snaps])
    diff = _Diffusion(grid, 0.0, "spectral")
    h1 = np.array([diff.h1_sq(s.values) for s in snaps])
    traj = Trajectory(times, snaps, EnergyLedger(tt, l2, h1, np.zeros_like(tt), np.zeros_like(tt)),
                      {"delta": delta, "method": method, "refine": refine, "n_cells": grid.n_cells,
                       "n_time_nodes": int(nodes.size)}, field_.describe(), "backward")
    bound = sum(s.sup_time_integral() for s in srcs)
    traj.checks["sup_bound"] = bool(max(np.max(np.abs(s.values)) for s in snaps) <= bound * (1 + 1e-10) + 1e-300)
    return traj


def pushforward_pairings(spec: VelocityField, datum, grid: TorusGrid, nodes: Sequence[float],
                         weights: Sequence[Callable], *, method: str = "heun", theta: float = 0.25,
                         refine: int = 1) -> np.ndarray:
    """``<rho(t), g(t)>`` for the push-forward ``rho(t) = X(t, 0)# rho_in``.

    By measure preservation this is ``int rho_in(y) g(t, X(t, 0, y)) dy``,
    evaluated by forward-tracing the cell centres through ``nodes``.  The
    mean of ``rho_in`` is paired with the untransported ``g`` (same integral
    by measure preservation), so constant data are exact.  Each entry of
    ``weights`` is a callable ``g(t, x1, x2)``; returns an array of shape
    ``(len(nodes), len(weights))``.
    """
    rho0 = _as_field(datum, grid).values
    mean = float(np.mean(rho0))
    rho0 = rho0 - mean
    y1, y2 = grid.centers()
    c1, c2 = y1, y2
    nodes = [float(s) for s in nodes]
    out = np.zeros((len(nodes), len(weights)))
    prev = 0.0
    for k, s in enumerate(nodes):
        if s != prev:
            y1, y2 = trace_flow(spec, s, prev, y1, y2, method=method, theta=theta, refine=refine)
            prev = s
        for j, g in enumerate(weights):
            vals = g(s, y1, y2)
            if not np.any(vals):
                continue
            out[k, j] = float(np.vdot(rho0, vals)) / rho0.size
            if mean != 0.0:
                out[k, j] += mean * float(np.mean(g(s, c1, c2)))
    return out
