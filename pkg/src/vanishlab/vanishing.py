"""Experiment drivers: vanishing-diffusivity and vanishing-mollification
sweeps, duality reports, dissipation meter, weak-formulation residuals and
the non-uniqueness demonstration along the dyadic-exchange field.

Weak-star convergence is probed through a fixed finite panel of space-time
sources ``chi_j``: each run is summarised by its pairings
``p(j) = int int rho chi_j`` and consecutive runs by the Cauchy gap
``g_i = max_j |p_i(j) - p_{i+1}(j)|``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import signal

from .evolve import (
    AdjointPair,
    EnergyLedger,
    SolveConfig,
    Trajectory,
    pushforward_pairings,
    regularized_nodes,
    solve_backward_diffusive,
    solve_backward_regularized,
    solve_forward,
    solve_forward_regularized,
    source_breakpoints,
)
from .torus import (
    ScalarGridField,
    SourceSpec,
    TestFunctionSpec,
    TorusGrid,
    norm_l2,
    pairing,
)
from .velocity import (
    CheckerboardDatum,
    DyadicExchange,
    MollifierSpec,
    VelocityField,
    build_dyadic_exchange,
    checkerboard,
    flow,
    mollify,
)

RESOLVED = "resolved"
UNDER_RESOLVED = "under-resolved"


class UnderResolved(ValueError):
    """A sweep parameter lies below the grid's resolution guard."""


def nu_min(grid: TorusGrid) -> float:
    """Resolution guard: diffusive layers of width ``sqrt(nu)`` span at least
    four cells."""
    return (4.0 / grid.n_cells) ** 2


def delta_min(grid: TorusGrid) -> float:
    return 2.0 / grid.n_cells


def default_source_panel(horizon: float = 1.0) -> list[SourceSpec]:
    """Eight sources with varied centres and scales, supported in ``(0, T)``."""
    rows = [
        (0.30, (0.25, 0.25), 0.20, 0.20, 1.0),
        (0.50, (0.75, 0.25), 0.30, 0.25, 1.0),
        (0.70, (0.25, 0.75), 0.20, 0.15, -1.0),
        (0.60, (0.60, 0.60), 0.35, 0.30, 1.0),
        (0.80, (0.40, 0.10), 0.15, 0.20, 1.0),
        (0.45, (0.10, 0.50), 0.25, 0.35, -1.0),
        (0.75, (0.90, 0.85), 0.20, 0.25, 1.0),
        (0.55, (0.50, 0.35), 0.40, 0.10, 1.0),
    ]
    return [SourceSpec(t0 * horizon, x0, rt * horizon, rx, a, horizon) for t0, x0, rt, rx, a in rows]


def default_test_panel(t_lo: float, horizon: float = 1.0, side: str = "forward") -> list[TestFunctionSpec]:
    """Test functions supported in ``(t_lo, T)``."""
    span = horizon - t_lo
    rows = [
        (0.30, (0.30, 0.30), 0.20, 0.20),
        (0.55, (0.70, 0.40), 0.25, 0.30),
        (0.75, (0.45, 0.80), 0.15, 0.25),
        (0.40, (0.85, 0.65), 0.30, 0.35),
    ]
    return [TestFunctionSpec(t_lo + f * span, x0, r * span, rx, 1.0, horizon, side) for f, x0, r, rx in rows]


# ---------------------------------------------------------------------------
# Records


@dataclass
class SweepRecord:
    kind: str
    params: list[float]
    pairings: np.ndarray
    gaps: list[float]
    flags: list[str]
    dissipation: list[float] | None
    ledgers: list[dict]
    n_cells: int
    early_l2: dict = field(default_factory=dict)
    datum_l2: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def resolved_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.flags) if f == RESOLVED]

    @property
    def resolved_gaps(self) -> list[float]:
        idx = set(self.resolved_indices)
        return [g for i, g in enumerate(self.gaps) if i in idx and i + 1 in idx]

    @property
    def gap_ratios(self) -> list[float]:
        g = self.resolved_gaps
        return [a / b if b > 0 else math.inf for a, b in zip(g[:-1], g[1:])]

    @property
    def verdict(self) -> str:
        g = self.resolved_gaps
        if len(g) < 2:
            return "inconclusive"
        return "selecting" if all(b < a for a, b in zip(g[:-1], g[1:])) else "not selecting"

    @property
    def last_pairings(self) -> np.ndarray:
        idx = self.resolved_indices
        return self.pairings[idx[-1] if idx else -1]

    @property
    def last_gap(self) -> float:
        g = self.resolved_gaps
        return g[-1] if g else math.nan

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "pairings": self.pairings.tolist(),
            "gaps": self.gaps,
            "gap_ratios": self.gap_ratios,
            "flags": self.flags,
            "dissipation": self.dissipation,
            "verdict": self.verdict,
            "n_cells": self.n_cells,
            "early_l2": {str(k): v for k, v in self.early_l2.items()},
            "datum_l2": self.datum_l2,
            "ledgers": self.ledgers,
            "notes": self.notes,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for i, p in enumerate(self.params):
            for j, val in enumerate(self.pairings[i]):
                rows.append({
                    "parameter": p,
                    "source_id": j,
                    "pairing": float(val),
                    "gap": self.gaps[i] if i < len(self.gaps) else "",
                    "dissipation": self.dissipation[i] if self.dissipation is not None else "",
                    "flag": self.flags[i],
                })
        return rows


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    mode: str
    scale: float = 0.0

    @property
    def abs_gap(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def rel_gap(self) -> float:
        s = self.scale if self.scale > 0 else max(abs(self.lhs), abs(self.rhs))
        return self.abs_gap / s if s > 0 else 0.0

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "abs_gap": self.abs_gap, "rel_gap": self.rel_gap,
                "mode": self.mode}


@dataclass
class ResidualReport:
    """``series[j][l]`` is the residual of test function ``j`` at quadrature
    level ``l``; ``scales[j]`` normalises it."""

    levels: list[dict]
    series: list[list[float]]
    scales: list[float]

    def __post_init__(self):
        if len(self.levels) < 3:
            raise ValueError("a residual report needs at least 3 refinement levels")
        if not all(math.isfinite(r) for row in self.series for r in row):
            raise ValueError("non-finite residual")

    @property
    def finest(self) -> list[float]:
        return [abs(row[-1]) for row in self.series]

    @property
    def finest_relative(self) -> list[float]:
        return [abs(row[-1]) / s if s > 0 else abs(row[-1]) for row, s in zip(self.series, self.scales)]

    def to_dict(self) -> dict:
        return {"levels": self.levels, "series": self.series, "scales": self.scales,
                "finest_relative": self.finest_relative}


@dataclass
class DissipationReport:
    params: list[float]
    series: list[float]
    flags: list[str]

    @property
    def resolved_series(self) -> list[float]:
        return [d for d, f in zip(self.series, self.flags) if f == RESOLVED]

    @property
    def monotone(self) -> bool:
        d = self.resolved_series
        return all(b < a for a, b in zip(d[:-1], d[1:]))

    @property
    def halved(self) -> bool:
        d = self.resolved_series
        return bool(d) and d[-1] <= 0.5 * d[0]

    @property
    def verdict(self) -> str:
        if self.monotone and self.halved:
            return "no anomalous dissipation (resolved range)"
        return "inconclusive"

    def to_dict(self) -> dict:
        return {"params": self.params, "series": self.series, "flags": self.flags,
                "monotone": self.monotone, "halved": self.halved, "verdict": self.verdict}


# ---------------------------------------------------------------------------
# Sweeps


def _check_decreasing(values, name):
    v = list(values)
    if not v:
        raise ValueError(f"empty {name} list")
    if any(b >= a for a, b in zip(v[:-1], v[1:])):
        raise ValueError(f"{name} list must be strictly decreasing")


def _time_pairings(probe_rows: np.ndarray, nodes: np.ndarray, panel) -> np.ndarray:
    out = np.zeros(len(panel))
    for j, src in enumerate(panel):
        out[j] = float(np.trapezoid(probe_rows[:, j] * src.time_profile(nodes), nodes))
    return out


def _gaps(pairings: np.ndarray) -> list[float]:
    return [float(np.max(np.abs(pairings[i] - pairings[i + 1]))) for i in range(pairings.shape[0] - 1)]


def _nu_job(args):
    spec, rho_in, nu, grid, panel, options = args
    cfg = SolveConfig.build(spec, grid, nu, sources=panel, output_times=list(options["early_times"]) + [spec.horizon],
                            max_dt=options["max_dt"], cfl=options["cfl"], interpolation=options["interpolation"],
                            diffusion=options["diffusion"])
    probes = [s.sample_space(grid) for s in panel]
    traj = solve_forward(spec, rho_in, cfg, probes=probes)
    nodes = cfg.time_nodes
    pairs = _time_pairings(traj.probes, nodes, panel)
    early = {t: norm_l2(traj.at(cfg.time_nodes[np.argmin(np.abs(nodes - t))])) for t in options["early_times"]}
    led = traj.ledger
    summary = {"nu": nu, "l2_sq_final": float(led.l2_sq[-1]), "grad_energy_cum_final": float(led.grad_energy_cum[-1]),
               "energy_inequality": traj.checks["energy_inequality"], "max_principle": traj.checks["max_principle"],
               "mass": traj.checks["mass"], "n_time_nodes": int(nodes.size)}
    return pairs, 0.5 * float(led.grad_energy_cum[-1]), summary, early


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def sweep_nu(spec: VelocityField, rho_in, nus: Sequence[float], grid: TorusGrid,
             panel: Sequence[SourceSpec] | None = None, *, allow_underresolved: bool = False,
             early_times: Sequence[float] = (), max_dt: float | None = 1.0 / 256, cfl: float = 1.0,
             interpolation: str = "monotone-bilinear", diffusion: str = "auto", jobs: int = 1) -> SweepRecord:
    """Solve the advection-diffusion problem for each ``nu`` and record
    source pairings, Cauchy gaps and the dissipation integral."""
    _check_decreasing(nus, "nu")
    panel = list(panel) if panel is not None else default_source_panel(spec.horizon)
    guard = nu_min(grid)
    flags = [RESOLVED if nu >= guard else UNDER_RESOLVED for nu in nus]
    if UNDER_RESOLVED in flags and not allow_underresolved:
        bad = [nu for nu, f in zip(nus, flags) if f == UNDER_RESOLVED]
        raise UnderResolved(f"nu values {bad} lie below the resolution guard nu_min(N) = (4/N)^2 = {guard:.3e}")
    if isinstance(rho_in, ScalarGridField):
        datum = rho_in
    else:
        datum = grid.sample(rho_in)
    options = {"early_times": tuple(early_times), "max_dt": max_dt, "cfl": cfl,
               "interpolation": interpolation, "diffusion": diffusion}
    results = _map(_nu_job, [(spec, datum, float(nu), grid, panel, options) for nu in nus], jobs)
    pairings = np.array([r[0] for r in results])
    early = {t: [r[3][t] for r in results] for t in early_times}
    return SweepRecord("nu", [float(n) for n in nus], pairings, _gaps(pairings), flags,
                       [r[1] for r in results], [r[2] for r in results], grid.n_cells, early, norm_l2(datum),
                       [f"resolution guard nu_min = (4/N)^2 = {guard:.6g} (engineering convention)"])


def _bump_weight(src: SourceSpec):
    def g(t, x1, x2):
        a = float(src.time_profile(t))
        if a == 0.0:
            return np.zeros(1)
        return a * src.space_profile(x1, x2)
    return g


def _delta_job(args):
    spec, mollifier, datum, delta, grid, panel, options = args
    field_ = mollify(spec, mollifier, delta)
    bps = field_.breakpoints() + source_breakpoints(panel)
    nodes = regularized_nodes(spec.horizon, bps, options["steps"])
    rows = pushforward_pairings(field_, datum, grid, nodes, [_bump_weight(s) for s in panel],
                                method=options["method"], refine=options["refine"])
    pairs = np.array([float(np.trapezoid(rows[:, j], nodes)) for j in range(len(panel))])
    return pairs, {"delta": delta, "n_time_nodes": int(nodes.size)}


def sweep_delta(spec: VelocityField, mollifier: MollifierSpec | None, rho_in, deltas: Sequence[float],
                grid: TorusGrid, panel: Sequence[SourceSpec] | None = None, *, steps: int = 256,
                method: str = "heun", refine: int = 1, jobs: int = 1) -> SweepRecord:
    """Mollification sweep through the push-forward representation
    ``rho^delta(t) = X^delta(t, 0)# rho_in``; pairings are computed as
    ``int rho_in(y) chi(t, X^delta(t, 0, y)) dy`` (the flow preserves measure)."""
    _check_decreasing(deltas, "delta")
    dmin = delta_min(grid)
    if min(deltas) < dmin * (1 - 1e-12):
        raise ValueError(f"delta values below the grid representability limit 2/N = {dmin:g}")
    mollifier = mollifier or MollifierSpec()
    panel = list(panel) if panel is not None else default_source_panel(spec.horizon)
    datum = rho_in if isinstance(rho_in, ScalarGridField) else grid.sample(rho_in)
    options = {"steps": steps, "method": method, "refine": refine}
    results = _map(_delta_job, [(spec, mollifier, datum, float(d), grid, panel, options) for d in deltas], jobs)
    pairings = np.array([r[0] for r in results])
    return SweepRecord("delta", [float(d) for d in deltas], pairings, _gaps(pairings), [RESOLVED] * len(deltas),
                       None, [r[1] for r in results], grid.n_cells, {}, norm_l2(datum))


def selection_consistency(nu_sweep: SweepRecord, delta_sweep: SweepRecord) -> dict:
    """Terminal pairings of the two sweeps against the sum of their last gaps
    (an engineering tolerance; no rate is known for the two limits)."""
    diff = float(np.max(np.abs(nu_sweep.last_pairings - delta_sweep.last_pairings)))
    tol = nu_sweep.last_gap + delta_sweep.last_gap
    return {"max_difference": diff, "tolerance": tol, "agree": bool(diff <= tol)}


def dissipation_meter(sweep: SweepRecord) -> DissipationReport:
    """``D_i = nu_i int_0^T ||grad rho||^2`` (half the cumulative gradient
    energy of the ledger)."""
    if sweep.dissipation is None:
        raise ValueError("sweep carries no dissipation data")
    return DissipationReport(list(sweep.params), list(sweep.dissipation), list(sweep.flags))


# ---------------------------------------------------------------------------
# Duality


def with_outputs_covering(config: SolveConfig, sources, extra: Sequence[float] = (0.0,)) -> SolveConfig:
    """Config whose output times include every node in the sources' supports."""
    nodes = config.time_nodes
    keep = set(float(x) for x in config.output_times) | set(float(e) for e in extra)
    for src in ([sources] if isinstance(sources, SourceSpec) else sources):
        lo, hi = src.time_support
        keep.update(float(t) for t in nodes if lo <= t <= hi)
    lo_hi = [float(t) for t in nodes]
    for t in list(keep):
        if t not in lo_hi:
            keep.discard(t)
    return replace(config, output_times=tuple(sorted(keep)))


def duality_check(forward: Trajectory, backward: Trajectory, rho_in, chi) -> DualityReport:
    """``int int rho chi`` from the forward snapshots against
    ``<rho_in, theta_chi(0)>`` from the backward trajectory."""
    sources = [chi] if isinstance(chi, SourceSpec) else list(chi)
    nodes = forward.ledger.times
    snap_times = np.array(forward.times)
    grid = forward.grid
    datum = rho_in if isinstance(rho_in, ScalarGridField) else grid.sample(rho_in)
    lhs = 0.0
    scale = 0.0
    for src in sources:
        lo, hi = src.time_support
        inside = [float(t) for t in nodes if lo <= t <= hi]
        missing = [t for t in inside if not np.any(np.abs(snap_times - t) <= 1e-13)]
        if missing:
            raise ValueError(f"time nodes missing within the source support: {missing[:3]}")
        ts = inside
        prof = src.sample_space(grid)
        vals = [float(src.time_profile(t)) * float(np.vdot(forward.at(t).values, prof)) / prof.size for t in ts]
        lhs += float(np.trapezoid(vals, ts)) if len(ts) > 1 else 0.0
        scale += src.sup_time_integral() * src.space_l1()
    rhs = pairing(datum, backward.at(0.0))
    scale *= float(np.max(np.abs(datum.values))) if datum.values.size else 0.0
    return DualityReport(lhs, rhs, "independent", scale)


def duality_from_pair(pair: AdjointPair) -> DualityReport:
    return DualityReport(pair.lhs, pair.rhs, "discrete-adjoint", pair.scale)


def regularized_duality(spec: VelocityField, mollifier: MollifierSpec | None, delta: float, rho_in, chi,
                        grid: TorusGrid, *, steps: int = 256, method: str = "heun",
                        refine: int = 1) -> DualityReport:
    """Duality for the mollified field from two independent computations.

    The left side pairs ``rho^delta = rho_in o X^delta(0, t)`` (backward
    traces of the grid centres, one per node) with the sources; the right
    side pairs ``rho_in`` with ``theta^delta(0)`` built from forward traces.
    Both use the trapezoid rule on the same ``steps`` node lattice.
    """
    sources = [chi] if isinstance(chi, SourceSpec) else list(chi)
    field_ = mollify(spec, mollifier, delta)
    nodes = regularized_nodes(spec.horizon, field_.breakpoints() + source_breakpoints(sources), steps)
    fwd = solve_forward_regularized(spec, mollifier, delta, rho_in, nodes, grid=grid, method=method,
                                    refine=refine)
    bwd = solve_backward_regularized(spec, mollifier, delta, sources, [0.0], grid=grid, time_nodes=nodes,
                                     method=method, refine=refine)
    datum = rho_in if isinstance(rho_in, ScalarGridField) else grid.sample(rho_in)
    vals = np.zeros(nodes.size)
    for src in sources:
        prof = src.sample_space(grid)
        for k, t in enumerate(nodes):
            a = float(src.time_profile(t))
            if a != 0.0:
                vals[k] += a * float(np.vdot(fwd.at(float(t)).values, prof)) / prof.size
    lhs = float(np.trapezoid(vals, nodes))
    rhs = pairing(datum, bwd.at(0.0))
    scale = sum(s.sup_time_integral() * s.space_l1() for s in sources) * float(np.max(np.abs(datum.values)))
    return DualityReport(lhs, rhs, "regularized", scale)


# ---------------------------------------------------------------------------
# Weak-formulation residual


def _strided(times: np.ndarray, breaks: Sequence[float], stride: int) -> list[int]:
    """Every ``stride``-th index inside each breakpoint-delimited segment,
    segment ends always kept."""
    marks = [0] + [int(np.argmin(np.abs(times - b))) for b in breaks
                   if times[0] < b < times[-1] and np.min(np.abs(times - b)) <= 1e-13] + [len(times) - 1]
    marks = sorted(set(marks))
    idx = []
    for a, b in zip(marks[:-1], marks[1:]):
        idx.extend(range(a, b, stride))
    idx.append(marks[-1])
    return idx


def _upsample(values: np.ndarray, q: int) -> np.ndarray:
    """Trigonometric interpolant of cell-centred samples on a ``q``-times
    finer grid with the same first node."""
    if q == 1:
        return values
    return signal.resample(signal.resample(values, q * values.shape[0], axis=0), q * values.shape[1], axis=1)


def weak_residual(candidate: Trajectory, spec: VelocityField, rho_in, panel: Sequence[TestFunctionSpec],
                  levels: Sequence[tuple[int, int]] = ((4, 1), (2, 2), (1, 4)), *, nu: float | None = None,
                  space_rule: str = "trigonometric") -> ResidualReport:
    """``R(phi) = int int rho (d_t phi + b . grad phi + nu Lap phi) + int rho_in phi(0)``.

    Each level is ``(time stride, q)``.  In time, the trapezoid rule uses
    every ``stride``-th snapshot within each interval where the field is
    constant, with that interval's field piece at both ends.  In space,
    ``space_rule="trigonometric"`` integrates the trigonometric interpolant
    of the data on a ``q``-times finer grid; ``space_rule="cell"`` reads the
    data as piecewise constant on cells and uses a ``q x q`` midpoint rule
    per cell.
    """
    if space_rule not in ("trigonometric", "cell"):
        raise ValueError(f"unknown space rule {space_rule!r}")
    if len(levels) < 3:
        raise ValueError("a residual report needs at least 3 refinement levels")
    if nu is None:
        nu = float(candidate.config.get("nu", 0.0))
    times = np.array(candidate.times)
    order = np.argsort(times)
    times = times[order]
    snaps = [candidate.snapshots[i] for i in order]
    T = spec.horizon
    for phi in panel:
        lo, hi = phi.time_support
        if hi >= T or phi.side != "forward":
            raise ValueError("test function support must lie in [0, T)")
        if max(lo, 0.0) < times[0] - 1e-13 or hi > times[-1] + 1e-13:
            raise ValueError("snapshots do not cover the test function support")
    grid = snaps[0].grid
    n = grid.n_cells
    datum = rho_in if isinstance(rho_in, ScalarGridField) else grid.sample(rho_in)
    series = [[] for _ in panel]
    scales = [0.0 for _ in panel]
    level_info = []
    breaks = spec.breakpoints()

    def space_nodes(q):
        if space_rule == "trigonometric":
            x = 0.5 / n + np.arange(q * n) / (q * n)
        else:
            x = ((np.arange(n)[:, None] + (np.arange(q) + 0.5)[None, :] / q) / n).ravel()
        return np.meshgrid(x, x, indexing="ij")

    def expand(values, q):
        if space_rule == "trigonometric":
            return _upsample(values, q)
        return np.repeat(np.repeat(values, q, axis=0), q, axis=1)

    for stride, q in levels:
        idx = _strided(times, breaks, stride)
        level_info.append({"time_stride": stride, "space_refinement": q, "n_times": len(idx),
                           "space_rule": space_rule})
        x1, x2 = space_nodes(q)
        fine: dict = {}

        def data(k):
            if k not in fine:
                fine[k] = expand(snaps[k].values, q)
            return fine[k]

        for j, phi in enumerate(panel):
            lo, hi = phi.time_support
            total = 0.0
            scale = 0.0
            for a, b in zip(idx[:-1], idx[1:]):
                ta, tb = float(times[a]), float(times[b])
                if tb <= lo or ta >= hi:
                    continue
                piece = spec.piece_at(0.5 * (ta + tb))
                v1, v2 = piece.eval(x1, x2)
                acc = []
                mag = []
                for k, t in ((a, ta), (b, tb)):
                    u = data(k)
                    g1, g2 = phi.grad(t, x1, x2)
                    dphi = phi.dt(t, x1, x2)
                    adv = v1 * g1 + v2 * g2
                    lap = nu * phi.laplacian(t, x1, x2) if nu else 0.0
                    integrand = dphi + adv + lap
                    acc.append(float(np.vdot(u, integrand)) / u.size)
                    mag.append(float(np.max(np.abs(u))) * float(np.mean(np.abs(dphi) + np.abs(adv) + np.abs(lap))))
                total += 0.5 * (tb - ta) * (acc[0] + acc[1])
                scale += 0.5 * (tb - ta) * (mag[0] + mag[1])
            u0 = expand(datum.values, q)
            init = float(np.vdot(u0, phi.value(0.0, x1, x2))) / u0.size
            total += init
            scale += abs(init)
            series[j].append(total)
            scales[j] = max(scales[j], scale)
    return ResidualReport(level_info, series, scales)


def corrupt_snapshot(traj: Trajectory, index: int, factor: float = 1.1) -> Trajectory:
    snaps = list(traj.snapshots)
    snaps[index] = snaps[index].with_values(snaps[index].values * factor)
    return replace(traj, snapshots=snaps)


# ---------------------------------------------------------------------------
# Dyadic-exchange demonstrations


@dataclass
class DepauwReport:
    n_max: int
    n_cells: int
    activation_time: float
    exchange_exact: dict
    weak_star_pairings: dict
    residual: ResidualReport
    corrupted_residual: ResidualReport
    corrupted_index: int
    separation_l2: float
    vanishing_diffusivity_l2: float

    @property
    def residual_ratio(self) -> float:
        """Smallest corrupted/uncorrupted finest-level ratio over the panel's
        most sensitive function."""
        best = 0.0
        for r, c in zip(self.residual.finest, self.corrupted_residual.finest):
            best = max(best, c / r if r > 0 else math.inf)
        return best

    @property
    def passed(self) -> bool:
        return (all(self.exchange_exact.values()) and self.residual_ratio >= 10.0
                and abs(self.separation_l2 - 1.0) <= 1e-12 and self.vanishing_diffusivity_l2 == 0.0)

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "n_cells": self.n_cells,
            "activation_time": self.activation_time,
            "exchange_exact": {str(k): v for k, v in self.exchange_exact.items()},
            "weak_star_pairings": {str(k): v for k, v in self.weak_star_pairings.items()},
            "residual": self.residual.to_dict(),
            "corrupted_residual": self.corrupted_residual.to_dict(),
            "corrupted_index": self.corrupted_index,
            "residual_ratio": self.residual_ratio,
            "separation_l2": self.separation_l2,
            "vanishing_diffusivity_l2": self.vanishing_diffusivity_l2,
            "passed": self.passed,
        }


def depauw_solution(spec: DyadicExchange, grid: TorusGrid, max_dt: float | None = 1.0 / 256) -> Trajectory:
    """The alternative bounded solution with zero datum: ``c_{n_max+1}``
    frozen up to the activation time, then transported exactly, so that it
    equals ``c_n`` at ``t = 2^-n``.

    While the field is active the nodes are spaced by ``h/2``: both shear
    speeds then move the pattern by whole cells per step, so every snapshot
    is piecewise constant on cells and the cell quadrature reads it exactly.
    """
    n_top = spec.n_max + 1
    if grid.n_cells % (2 ** (n_top + 1)):
        raise ValueError(f"resolution insufficient: c_{n_top} needs 2^{n_top + 1} | N")
    t_act = spec.activation_time
    m0 = max(2, math.ceil(t_act / max_dt - 1e-9)) if max_dt else 2
    step = Fraction(1, 2 * grid.n_cells)
    m1 = (Fraction(spec.horizon) - Fraction(t_act)) / step
    if m1.denominator != 1 or any((Fraction(b) - Fraction(t_act)) % step for b in spec.breakpoints()):
        raise ValueError("field breakpoints are not on the h/2 lattice")
    nodes = np.concatenate([t_act * np.arange(m0) / m0, t_act + float(step) * np.arange(int(m1) + 1)])
    datum = CheckerboardDatum(n_top)
    x1, x2 = grid.centers()
    times, snaps = [], []
    for t in nodes:
        t = float(t)
        if t == 0.0:
            vals = np.zeros_like(x1)
        elif t <= t_act:
            vals = datum(x1, x2)
        else:
            d1, d2 = flow(spec, t_act, t, x1, x2)
            vals = datum(d1, d2)
        times.append(t)
        snaps.append(ScalarGridField(grid, vals))
    l2 = np.array([norm_l2(s) ** 2 for s in snaps])
    z = np.zeros_like(l2)
    return Trajectory(times, snaps, EnergyLedger(np.array(times), l2, z, z, z),
                      {"nu": 0.0, "n_cells": grid.n_cells, "construction": "exact slab transport"},
                      spec.describe(), "forward")


def depauw_nonuniqueness_demo(n_max: int, grid: TorusGrid, panel: Sequence[TestFunctionSpec] | None = None,
                              *, nu_check: float | None = None) -> DepauwReport:
    spec = build_dyadic_exchange(1, n_max)
    t_act = spec.activation_time
    traj = depauw_solution(spec, grid)
    if panel is None:
        panel = default_test_panel(t_act, spec.horizon)
    for phi in panel:
        if phi.time_support[0] <= t_act:
            raise ValueError("test functions must vanish for t <= 2^-(n_max+1), where the field is truncated")
    exchange = {}
    star = {}
    probe = panel[0]
    for n in range(1, n_max + 1):
        snap = traj.at(2.0**-n)
        exchange[n] = bool(np.array_equal(snap.values, checkerboard(n, grid).values))
        star[n] = abs(pairing(snap, grid.sample(lambda a, b: probe.space_profile(a, b))))
    zero = ScalarGridField(grid, np.zeros((grid.n_cells,) * 2))
    res = weak_residual(traj, spec, zero, panel, nu=0.0, space_rule="cell")
    # corrupt the snapshot with the largest weight in the first test function's integrand
    times = np.array(traj.times)
    lo, hi = panel[0].time_support
    inside = np.where((times > lo) & (times < hi))[0]
    k = int(inside[np.argmin(np.abs(times[inside] - panel[0].t0))])
    bad = weak_residual(corrupt_snapshot(traj, k), spec, zero, panel, nu=0.0, space_rule="cell")
    nu = nu_check if nu_check is not None else max(nu_min(grid), 1e-3)
    cfg = SolveConfig.build(spec, grid, nu, output_times=[spec.horizon])
    vd = solve_forward(spec, zero, cfg)
    return DepauwReport(n_max, grid.n_cells, t_act, exchange, star, res, bad, k,
                        norm_l2(traj.at(spec.horizon)), norm_l2(vd.final))


@dataclass
class L2RecoveryReport:
    time: float
    params: list[float]
    deficits: list[float]
    flags: list[str]

    @property
    def decreasing(self) -> bool:
        d = [x for x, f in zip(self.deficits, self.flags) if f == RESOLVED]
        return len(d) >= 2 and all(b < a for a, b in zip(d[:-1], d[1:]))

    def to_dict(self) -> dict:
        return {"time": self.time, "params": self.params, "deficits": self.deficits, "flags": self.flags,
                "decreasing": self.decreasing}


def l2_recovery_check(sweep: SweepRecord, time: float) -> L2RecoveryReport:
    """Deficit ``||rho_in|| - ||rho^nu(t)||`` at an early time, per ``nu``."""
    if time not in sweep.early_l2:
        raise ValueError(f"sweep stored no snapshot at t={time!r}")
    norms = sweep.early_l2[time]
    return L2RecoveryReport(time, list(sweep.params), [sweep.datum_l2 - n for n in norms], list(sweep.flags))


@dataclass
class BackwardProbeReport:
    times: list[float]
    params: list[float]
    gaps: list[list[float]]

    def to_dict(self) -> dict:
        return {"times": self.times, "params": self.params, "gaps": self.gaps}


def backward_strong_discontinuity_probe(spec: VelocityField, chi, nus: Sequence[float], grid: TorusGrid,
                                        times: Sequence[float] | None = None, *, max_dt: float | None = 1.0 / 256,
                                        interpolation: str = "monotone-bilinear") -> BackwardProbeReport:
    """``||theta(t) - theta(0)||`` at dyadic times for each ``nu``
    (exploratory: no verdict)."""
    if times is None:
        times = [2.0**-k for k in range(1, 7)]
    gaps = []
    for nu in nus:
        cfg = SolveConfig.build(spec, grid, nu, sources=[chi] if isinstance(chi, SourceSpec) else chi,
                                output_times=[0.0] + list(times), max_dt=max_dt, interpolation=interpolation)
        tr = solve_backward_diffusive(spec, chi, nu, cfg)
        th0 = tr.at(0.0)
        row = []
        for t in times:
            tt = float(cfg.time_nodes[np.argmin(np.abs(cfg.time_nodes - t))])
            d = tr.at(tt).values - th0.values
            row.append(norm_l2(th0.with_values(d)))
        gaps.append(row)
    return BackwardProbeReport(list(times), list(nus), gaps)
