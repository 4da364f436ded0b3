"""Experiment execution, artifacts and run manifests.

A run has three phases.  :func:`prepare` validates the configuration and
builds every input (field, datum, panels), raising before any solver work.
:func:`execute` computes all artifacts in memory.  :func:`write_outputs` is
the single writer: it stores the artifacts, the manifest with its checksum
inventory, and the wall-clock record, all inside one output directory.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import plots
from .config import ConfigError, RunConfig, echo
from .evolve import SolveConfig, adjoint_mode_pair, solve_backward_diffusive, solve_forward
from .interp import interpolate
from .io import FormatError, encode_fields, read_fields, table_csv, trajectory_sidecar
from .stochastic import estimate_rho, estimate_theta, incompressibility_check, simulate_flow
from .torus import ConstantDatum, ScalarGridField, SingleMode, SourceSpec, TorusGrid
from .vanishing import (
    UnderResolved,
    backward_strong_discontinuity_probe,
    default_source_panel,
    default_test_panel,
    delta_min,
    depauw_nonuniqueness_demo,
    depauw_solution,
    dissipation_meter,
    duality_check,
    duality_from_pair,
    l2_recovery_check,
    nu_min,
    regularized_duality,
    sweep_delta,
    sweep_nu,
    weak_residual,
    with_outputs_covering,
)
from .velocity import (
    DyadicExchange,
    MollifierSpec,
    SineProfile,
    SteadyShear,
    SteadyStream,
    ZeroField,
    build_dyadic_exchange,
    checkerboard,
    mollify,
)

MANIFEST = "manifest.json"
TIMING = "timing.json"


@dataclass
class Inputs:
    config: RunConfig
    grid: TorusGrid
    spec: object
    datum: ScalarGridField | None
    panel: list = field(default_factory=list)


@dataclass
class RunOutcome:
    config: RunConfig
    files: dict
    summary: dict
    truncation: dict | None
    seconds: float = 0.0


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True, default=_default) + "\n").encode()


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# Inputs


def _base_field(f: dict):
    T = f["horizon"]
    if f["type"] == "zero":
        return ZeroField(T)
    if f["type"] == "shear":
        return SteadyShear(f["axis"], SineProfile(f["amplitude"], f["k"], f["phase"]), T)
    if f["type"] == "stream":
        prof = SineProfile(1.0, f["k"])
        return SteadyStream(prof, prof, f["amplitude"], T)
    return build_dyadic_exchange(f["n_min"], f["n_max"], T, f["orientation"])


def build_field(cfg: RunConfig):
    """The configured field, mollified when ``field.delta > 0``."""
    f = cfg["field"]
    base = _base_field(f)
    if f.get("delta", 0.0) > 0:
        return mollify(base, MollifierSpec(), f["delta"])
    return base


def build_datum(cfg: RunConfig, grid: TorusGrid, base_dir: Path) -> ScalarGridField | None:
    d = cfg.sections.get("datum")
    if d is None:
        return None
    kind = d["type"]
    if kind == "checkerboard":
        return checkerboard(d["level"], grid)
    if kind == "single-mode":
        return SingleMode(d["k1"], d["k2"], d["amplitude"], d["phase"]).sample(grid)
    if kind == "constant":
        return ConstantDatum(d["value"]).sample(grid)
    path = Path(d["path"])
    if not path.is_absolute():
        path = base_dir / path
    try:
        fields = read_fields(path)
    except (OSError, FormatError) as exc:
        raise ConfigError("datum.path", f"cannot load {path}: {exc}") from None
    if fields[0].grid.n_cells != grid.n_cells:
        raise ConfigError("datum.path", f"file grid N={fields[0].grid.n_cells} differs from grid.n={grid.n_cells}")
    return fields[0]


def build_panel(cfg: RunConfig) -> list[SourceSpec]:
    p = cfg.sections.get("panel", {})
    T = cfg["field"]["horizon"]
    if p.get("kind", "default") == "default":
        return default_source_panel(T)
    out = []
    for j, args in enumerate(zip(p["t0"], p["x1"], p["x2"], p["r_t"], p["r_x"], p["amplitude"])):
        t0, a, b, rt, rx, amp = args
        try:
            out.append(SourceSpec(t0, (a, b), rt, rx, amp, T))
        except ValueError as exc:
            raise ConfigError(f"panel[{j}]", str(exc)) from None
    return out


def prepare(cfg: RunConfig, base_dir: Path | str = ".") -> Inputs:
    """Validate everything that can be checked without solving."""
    grid = TorusGrid(cfg["grid"]["n"])
    spec = build_field(cfg)
    datum = build_datum(cfg, grid, Path(base_dir))
    panel = build_panel(cfg)
    kind = cfg.kind
    guard = nu_min(grid)
    allow = cfg.get("sweep", "allow_underresolved", False)
    nu = cfg.get("solver", "nu")
    if nu is not None and 0 < nu < guard and not allow:
        raise UnderResolved(f"solver.nu: nu={nu!r} lies below the resolution guard nu_min(N) = (4/N)^2 = {guard:.6g}"
                            " (pass --allow-underresolved to override)")
    nus = cfg.get("sweep", "nus")
    if nus is not None:
        if any(b >= a for a, b in zip(nus[:-1], nus[1:])):
            raise ConfigError("sweep.nus", "must be strictly decreasing")
        bad = [v for v in nus if v < guard]
        if bad and not allow:
            raise UnderResolved(f"sweep.nus: {bad} lie below the resolution guard nu_min(N) = (4/N)^2 = {guard:.6g}"
                                " (pass --allow-underresolved to override)")
    deltas = cfg.get("sweep", "deltas")
    if kind == "duality" and cfg["duality"]["mode"] != "regularized":
        deltas = None
    if deltas is not None:
        if any(b >= a for a, b in zip(deltas[:-1], deltas[1:])):
            raise ConfigError("sweep.deltas", "must be strictly decreasing")
        dmin = delta_min(grid)
        if min(deltas) < dmin * (1 - 1e-12):
            raise UnderResolved(f"sweep.deltas: values below the resolution guard delta_min(N) = 2/N = {dmin:g}")
    if kind == "depauw-demo" and cfg["field"]["n_min"] != 1:
        raise ConfigError("field.n_min", "depauw-demo uses slabs from n = 1")
    if kind in ("solve", "duality", "mc-estimate", "check-weak"):
        try:
            _solve_config(cfg, spec, grid, panel).validate_for(spec)
        except ValueError as exc:
            raise ConfigError("solver", str(exc)) from None
    if kind == "mc-estimate":
        T = cfg["field"]["horizon"]
        if not 0 < cfg["mc"]["time"] < T:
            raise ConfigError("mc.time", "must lie in (0, horizon)")
        if cfg["mc"]["samples"] < max(10_000, 10 * cfg["mc"]["bins"] ** 2):
            raise ConfigError("mc.samples", "the incompressibility check needs at least max(10^4, 10 bins^2) samples")
    if kind == "check-weak":
        for j, phi in enumerate(default_test_panel(cfg["panel"]["test_lo"], cfg["field"]["horizon"])):
            if phi.time_support[1] >= cfg["field"]["horizon"]:
                raise ConfigError("panel.test_lo", f"test function {j} reaches the horizon")
    return Inputs(cfg, grid, spec, datum, panel)


def _solve_config(cfg: RunConfig, spec, grid: TorusGrid, sources=(), outputs=None) -> SolveConfig:
    s = cfg["solver"]
    return SolveConfig.build(spec, grid, s.get("nu", 0.0), cfl=s.get("cfl", 1.0), sources=sources,
                             output_times=list(outputs if outputs is not None else s.get("outputs", ())),
                             max_dt=s.get("max_dt"), scheme=s.get("scheme", "splitting"),
                             interpolation=s.get("interpolation", "monotone-bilinear"),
                             diffusion=s.get("diffusion", "auto"))


def truncation(spec) -> dict | None:
    spec = getattr(spec, "base", spec)
    if isinstance(spec, DyadicExchange):
        return {"n_min": spec.n_min, "n_max": spec.n_max, "activation_time": spec.activation_time}
    return None


# ---------------------------------------------------------------------------
# Experiments


def _ledger_csv(ledger: dict) -> bytes:
    keys = ("times", "l2_sq", "h1_sq", "grad_energy_cum", "source_work_cum")
    rows = zip(*(ledger[k] for k in keys))
    return table_csv(["t", "l2_sq", "h1_sq", "grad_energy_cum", "source_work_cum"], rows).encode()


def _sweep_csv(record) -> bytes:
    cols = ["parameter", "source_id", "pairing", "gap", "dissipation", "flag"]
    return table_csv(cols, ([r[c] for c in cols] for r in record.csv_rows())).encode()


def _run_solve(inp: Inputs, jobs: int):
    cfg, spec, grid = inp.config, inp.spec, inp.grid
    sc = _solve_config(cfg, spec, grid)
    traj = solve_forward(spec, inp.datum, sc)
    led = traj.ledger.to_dict()
    files = {
        "fields.bin": encode_fields(traj.snapshots),
        "ledger.csv": _ledger_csv(led),
        "ledger.svg": plots.ledger_svg(led).encode(),
        "fields.json": _json(trajectory_sidecar(traj)),
    }
    summary = {"checks": traj.checks, "final_l2_sq": float(led["l2_sq"][-1])}
    return files, summary


def _sweep_files(record) -> dict:
    files = {
        "sweep.json": _json(record.to_dict()),
        "sweep.csv": _sweep_csv(record),
        "pairings.svg": plots.sweep_pairings_svg(record).encode(),
    }
    if len(record.gaps) >= 1:
        files["gaps.svg"] = plots.sweep_gaps_svg(record).encode()
    return files


def _run_sweep_nu(inp: Inputs, jobs: int, dissipation: bool = False):
    cfg = inp.config
    s, sv = cfg["sweep"], cfg["solver"]
    record = sweep_nu(inp.spec, inp.datum, s["nus"], inp.grid, inp.panel,
                      allow_underresolved=s["allow_underresolved"], early_times=s["early_times"],
                      max_dt=sv["max_dt"], cfl=sv["cfl"], interpolation=sv["interpolation"],
                      diffusion=sv["diffusion"], jobs=jobs)
    files = _sweep_files(record)
    files["dissipation.svg"] = plots.dissipation_svg(record.params, record.dissipation, record.flags).encode()
    summary = {"gaps": record.gaps, "gap_ratios": record.gap_ratios, "verdict": record.verdict,
               "dissipation": record.dissipation}
    recovery = {}
    for t in s["early_times"]:
        rep = l2_recovery_check(record, t)
        recovery[repr(float(t))] = rep.to_dict()
    if recovery:
        files["l2_recovery.json"] = _json(recovery)
        summary["l2_recovery_decreasing"] = {k: v["decreasing"] for k, v in recovery.items()}
    if dissipation:
        rep = dissipation_meter(record)
        files["dissipation.json"] = _json(rep.to_dict())
        files["dissipation.csv"] = table_csv(["parameter", "dissipation", "flag"],
                                             zip(rep.params, rep.series, rep.flags)).encode()
        summary["dissipation_verdict"] = rep.verdict
    return files, summary


def _run_sweep_delta(inp: Inputs, jobs: int):
    cfg = inp.config
    m = cfg["mollifier"]
    record = sweep_delta(inp.spec, MollifierSpec(m["quadrature_order"]), inp.datum, cfg["sweep"]["deltas"],
                         inp.grid, inp.panel, steps=m["steps"], method=m["method"], refine=m["refine"], jobs=jobs)
    return _sweep_files(record), {"gaps": record.gaps, "gap_ratios": record.gap_ratios, "verdict": record.verdict}


def _run_duality(inp: Inputs, jobs: int):
    cfg, spec, grid = inp.config, inp.spec, inp.grid
    mode = cfg["duality"]["mode"]
    rows = []
    if mode == "regularized":
        m = cfg["mollifier"]
        moll = MollifierSpec(m["quadrature_order"])
        for delta in cfg["sweep"]["deltas"]:
            rep = regularized_duality(spec, moll, delta, inp.datum, inp.panel, grid, steps=m["steps"],
                                      method=m["method"], refine=m["refine"])
            rows.append(("all", delta, rep))
    else:
        nu = cfg["solver"]["nu"]
        for j, src in enumerate(inp.panel):
            sc = with_outputs_covering(_solve_config(cfg, spec, grid, [src], outputs=()), [src])
            if mode == "adjoint":
                rep = duality_from_pair(adjoint_mode_pair(spec, inp.datum, src, nu, sc))
            else:
                fwd = solve_forward(spec, inp.datum, sc)
                bwd = solve_backward_diffusive(spec, src, nu, sc)
                rep = duality_check(fwd, bwd, inp.datum, src)
            rows.append((j, nu, rep))
    table = [(str(j), p, r.lhs, r.rhs, r.abs_gap, r.rel_gap) for j, p, r in rows]
    files = {
        "duality.csv": table_csv(["source_id", "parameter", "lhs", "rhs", "abs_gap", "rel_gap"], table).encode(),
        "duality.json": _json({"mode": mode, "reports": [dict(r.to_dict(), source_id=str(j), parameter=p)
                                                         for j, p, r in rows]}),
    }
    return files, {"mode": mode, "max_rel_gap": max(r.rel_gap for _, _, r in rows)}


def _run_depauw(inp: Inputs, jobs: int):
    cfg, spec, grid = inp.config, inp.spec, inp.grid
    nu_check = cfg["depauw"]["nu_check"] or None
    rep = depauw_nonuniqueness_demo(spec.n_max, grid, nu_check=nu_check)
    traj = depauw_solution(spec, grid)
    times = [2.0 ** -n for n in range(spec.n_max, 0, -1)] + [spec.horizon]
    snaps = [traj.at(t) for t in times]
    files = {
        "depauw.json": _json(dict(rep.to_dict(), snapshot_times=times)),
        "fields.bin": encode_fields(snaps),
        "residual.svg": plots.residual_svg(rep.residual).encode(),
        "residual_corrupted.svg": plots.residual_svg(rep.corrupted_residual).encode(),
    }
    return files, {"passed": rep.passed, "residual_ratio": rep.residual_ratio, "separation_l2": rep.separation_l2}


def probe_points(count: int) -> np.ndarray:
    side = math.ceil(math.sqrt(count))
    ax = (np.arange(side) + 0.5) / side
    a, b = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)[:count]


def probe_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit child seed of the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def _grid_values(cfg, spec, datum, grid, t, src, points):
    """Forward and backward grid solutions read at ``points``; the datum is
    restricted to ``grid`` by trigonometric resampling."""
    nu = cfg["solver"]["nu"]
    sc = _solve_config(cfg, spec, grid, [src], outputs=[t])
    fwd = solve_forward(spec, datum, sc)
    bsc = _solve_config(cfg, spec, grid, [src], outputs=[t])
    bwd = solve_backward_diffusive(spec, src, nu, bsc)
    rho = interpolate(fwd.at(t).values, points[:, 0], points[:, 1], "cubic")
    theta = interpolate(bwd.at(t).values, points[:, 0], points[:, 1], "cubic")
    return rho, theta


def _run_mc(inp: Inputs, jobs: int):
    cfg, spec, grid = inp.config, inp.spec, inp.grid
    mc = cfg["mc"]
    nu = cfg["solver"]["nu"]
    seed = cfg["run"]["seed"]
    t = mc["time"]
    M = mc["samples"]
    dt_sde = mc["dt_sde"] or None
    src = inp.panel[0]
    pts = probe_points(mc["probes"])
    rho_g, th_g = _grid_values(cfg, spec, inp.datum, grid, t, src, pts)
    coarse = TorusGrid(grid.n_cells // 2)
    datum_c = ScalarGridField(coarse, inp.datum.values.reshape(coarse.n_cells, 2, coarse.n_cells, 2).mean(axis=(1, 3)))
    rho_c, th_c = _grid_values(cfg, spec, datum_c, coarse, t, src, pts)
    rows = []
    ok = True
    for p, x in enumerate(pts):
        er = estimate_rho(spec, inp.datum, nu, t, x, M, probe_seed(seed, 2 * p), dt_sde)
        et = estimate_theta(spec, src, nu, t, x, M, probe_seed(seed, 2 * p + 1), dt_sde)
        for name, est, g, gc in (("rho", er, rho_g[p], rho_c[p]), ("theta", et, th_g[p], th_c[p])):
            budget = abs(g - gc)
            inside = est.contains(float(g), 4.0, budget)
            ok &= inside
            rows.append((p, float(x[0]), float(x[1]), name, float(g), est.mean, est.stderr, budget, inside))
    cloud = simulate_flow(spec, nu, t, 0.0, pts[0], M, probe_seed(seed, 2 * len(pts)), dt_sde)
    inc = incompressibility_check(spec, nu, (0.0, spec.horizon), M, probe_seed(seed, 2 * len(pts) + 1),
                                  mc["bins"], dt_sde)
    cols = ["probe", "x1", "x2", "quantity", "grid", "mc_mean", "mc_stderr", "grid_budget", "within"]
    files = {
        "mc.csv": table_csv(cols, rows).encode(),
        "mc.json": _json({
            "probes": [dict(zip(cols, r)) for r in rows],
            "all_within": ok,
            "noise": {"increment_var": cloud.increment_var, "target": 2 * nu * cloud.dt_sde,
                      "stderr": cloud.increment_var_stderr, "calibrated": cloud.noise_calibrated()},
            "incompressibility": {"statistic": inc.statistic, "quantile": inc.quantile, "dof": inc.dof,
                                  "samples": inc.samples, "passed": inc.passed},
        }),
    }
    return files, {"all_within": ok, "noise_calibrated": cloud.noise_calibrated(), "incompressible": inc.passed}


def _run_check_weak(inp: Inputs, jobs: int):
    cfg, spec, grid = inp.config, inp.spec, inp.grid
    w = cfg["weak"]
    base = _solve_config(cfg, spec, grid, outputs=())
    sc = SolveConfig(base.nu, grid, base.time_nodes, base.scheme, base.interpolation, base.cfl, base.diffusion,
                     tuple(float(t) for t in base.time_nodes))
    traj = solve_forward(spec, inp.datum, sc)
    panel = default_test_panel(cfg["panel"]["test_lo"], spec.horizon)
    rep = weak_residual(traj, spec, inp.datum, panel, tuple(zip(w["strides"], w["refinements"])),
                        nu=sc.nu, space_rule=w["space_rule"])
    rows = [(j, l, rep.series[j][l], rep.scales[j]) for j in range(len(panel)) for l in range(len(rep.levels))]
    files = {
        "residual.json": _json(rep.to_dict()),
        "residual.csv": table_csv(["test_id", "level", "residual", "scale"], rows).encode(),
        "residual.svg": plots.residual_svg(rep).encode(),
    }
    return files, {"finest_relative": rep.finest_relative}


def _run_backward_probe(inp: Inputs, jobs: int):
    cfg = inp.config
    s = cfg["sweep"]
    rep = backward_strong_discontinuity_probe(inp.spec, inp.panel, s["nus"], inp.grid, s["probe_times"] or None,
                                              max_dt=cfg["solver"]["max_dt"],
                                              interpolation=cfg["solver"]["interpolation"])
    rows = [(nu, t, g) for nu, row in zip(rep.params, rep.gaps) for t, g in zip(rep.times, row)]
    series = [plots.Series(f"t = {t:.4g}", rep.params, [row[k] for row in rep.gaps]) for k, t in enumerate(rep.times)]
    files = {
        "backward_probe.json": _json(rep.to_dict()),
        "backward_probe.csv": table_csv(["parameter", "time", "l2_gap"], rows).encode(),
        "backward_probe.svg": plots.line_plot(series, title="||theta(t) - theta(0)|| against nu", xlabel="nu",
                                              ylabel="L2 gap", logx=True).encode(),
    }
    return files, {"exploratory": True}


EXPERIMENTS = {
    "solve": _run_solve,
    "sweep-nu": _run_sweep_nu,
    "sweep-delta": _run_sweep_delta,
    "dissipation": lambda inp, jobs: _run_sweep_nu(inp, jobs, dissipation=True),
    "duality": _run_duality,
    "depauw-demo": _run_depauw,
    "mc-estimate": _run_mc,
    "check-weak": _run_check_weak,
    "backward-probe": _run_backward_probe,
}


def execute(cfg: RunConfig, *, jobs: int = 1, base_dir: Path | str = ".") -> RunOutcome:
    """Validate, then compute every artifact in memory (no file writes)."""
    if jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    inp = prepare(cfg, base_dir)
    start = time.perf_counter()
    files, summary = EXPERIMENTS[cfg.kind](inp, jobs)
    files["config.echo"] = echo(cfg, omit=("run.output",)).encode()
    return RunOutcome(cfg, files, summary, truncation(inp.spec), time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Manifest and writer


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def build_manifest(outcome: RunOutcome) -> dict:
    cfg = outcome.config
    return {
        "artifact": "vanishlab",
        "version": __version__,
        "kind": cfg.kind,
        "seed": cfg["run"]["seed"],
        "config": echo(cfg, omit=("run.output",)),
        "truncation": outcome.truncation,
        "summary": outcome.summary,
        "wall_clock": TIMING,
        "files": {name: {"sha256": sha256(data), "bytes": len(data)} for name, data in sorted(outcome.files.items())},
    }


def write_outputs(outcome: RunOutcome, out_dir: Path | str) -> Path:
    """Single writer for one run; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in sorted(outcome.files.items()):
        target = out / name
        if target.parent != out:
            raise ValueError(f"artifact name {name!r} escapes the output directory")
        target.write_bytes(data)
    manifest = out / MANIFEST
    manifest.write_bytes(_json(build_manifest(outcome)))
    (out / TIMING).write_bytes(_json({"seconds": outcome.seconds}))
    return manifest


def verify_manifest(out_dir: Path | str) -> list[str]:
    """Names of inventoried files that are missing or modified."""
    out = Path(out_dir)
    man = json.loads((out / MANIFEST).read_text())
    bad = []
    for name, entry in man["files"].items():
        p = out / name
        if not p.is_file() or sha256(p.read_bytes()) != entry["sha256"]:
            bad.append(name)
    return bad
