import json
import math

import numpy as np
import pytest
from scipy import integrate

from vanishlab.evolve import SolveConfig, adjoint_mode_pair, solve_backward_diffusive, solve_forward
from vanishlab.torus import ConstantDatum, ScalarGridField, SingleMode, SourceSpec, TorusGrid, TestFunctionSpec
from vanishlab.vanishing import (
    UNDER_RESOLVED,
    UnderResolved,
    backward_strong_discontinuity_probe,
    corrupt_snapshot,
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
from vanishlab.velocity import (
    MollifierSpec,
    SineProfile,
    SteadyShear,
    SteadyStream,
    ZeroField,
    build_dyadic_exchange,
    checkerboard,
    mollify,
)
from vanishlab.evolve import pushforward_pairings, regularized_nodes, source_breakpoints

SHEAR = SteadyShear(0, SineProfile())
NUS = [2.0 ** -4, 2.0 ** -5, 2.0 ** -6]
PANEL = default_source_panel()


def heat_pairings(nu, grid):
    """Closed-form pairings of the heat solution from cos(2 pi x1)."""
    x1, _ = grid.centers()
    base = np.cos(2 * np.pi * x1)
    out = []
    for src in PANEL:
        space = float(np.mean(base * src.sample_space(grid)))
        lo, hi = src.time_support
        t_int = integrate.quad(lambda t: src.time_profile(t) * math.exp(-4 * math.pi ** 2 * nu * t), lo, hi,
                               epsabs=0, epsrel=1e-12)[0]
        out.append(space * t_int)
    return np.array(out)


class TestGuards:
    def test_guard_values(self):
        assert nu_min(TorusGrid(64)) == (4 / 64) ** 2
        assert delta_min(TorusGrid(64)) == 2 / 64

    def test_panel_shape(self):
        assert len(PANEL) == 8
        assert len({(s.x0, s.r_x) for s in PANEL}) == 8

    def test_underresolved_raises(self):
        g = TorusGrid(16)
        with pytest.raises(UnderResolved, match="resolution guard"):
            sweep_nu(ZeroField(), SingleMode(), [0.1, 0.05], g)

    def test_underresolved_flagged(self):
        g = TorusGrid(16)
        rec = sweep_nu(ZeroField(), SingleMode(), [0.1, 0.07, 0.05], g, allow_underresolved=True,
                       diffusion="spectral")
        assert rec.flags == ["resolved", "resolved", UNDER_RESOLVED]
        assert len(rec.resolved_gaps) == 1
        assert rec.verdict == "inconclusive"

    def test_decreasing_required(self):
        with pytest.raises(ValueError):
            sweep_nu(ZeroField(), SingleMode(), [0.1, 0.2], TorusGrid(16))
        with pytest.raises(ValueError):
            sweep_delta(SHEAR, None, SingleMode(), [0.1, 0.1], TorusGrid(16))

    def test_delta_below_grid(self):
        with pytest.raises(ValueError, match="2/N"):
            sweep_delta(SHEAR, None, SingleMode(), [0.2, 0.05], TorusGrid(32))


class TestSweepNu:
    @pytest.fixture(scope="class")
    @classmethod
    def heat(cls):
        return sweep_nu(ZeroField(), SingleMode(), NUS, TorusGrid(32), diffusion="spectral")

    def test_heat_pairings(self, heat):
        g = TorusGrid(32)
        for nu, row in zip(NUS, heat.pairings):
            ref = heat_pairings(nu, g)
            assert np.max(np.abs(row - ref)) <= 1e-5 * np.max(np.abs(ref))

    def test_gaps_scale_with_parameter_step(self, heat):
        steps = np.abs(np.diff(NUS))
        r = np.array(heat.gaps) / steps
        assert 0.5 <= r[0] / r[1] <= 2.0
        assert heat.verdict == "selecting"

    def test_heat_dissipation(self, heat):
        rep = dissipation_meter(heat)
        for nu, d in zip(NUS, rep.series):
            assert d == pytest.approx((1 - math.exp(-8 * math.pi ** 2 * nu)) / 4, rel=1e-6)
        assert rep.monotone

    def test_zero_datum(self):
        g = TorusGrid(16)
        rec = sweep_nu(SHEAR, ConstantDatum(0.0), [0.1, 0.07], g)
        assert np.all(rec.pairings == 0) and rec.gaps == [0.0]

    def test_constant_no_dissipation(self):
        rec = sweep_nu(build_dyadic_exchange(1, 2), ConstantDatum(1.0), [0.1, 0.07], TorusGrid(16))
        assert max(abs(d) for d in dissipation_meter(rec).series) <= 1e-20

    def test_deterministic_and_parallel(self):
        g = TorusGrid(16)
        spec = build_dyadic_exchange(1, 2)
        a = sweep_nu(spec, checkerboard(1, g), [0.1, 0.08, 0.07], g)
        b = sweep_nu(spec, checkerboard(1, g), [0.1, 0.08, 0.07], g)
        c = sweep_nu(spec, checkerboard(1, g), [0.1, 0.08, 0.07], g, jobs=2)
        assert np.array_equal(a.pairings, b.pairings) and np.array_equal(a.pairings, c.pairings)
        assert a.dissipation == c.dissipation

    def test_serialization(self, heat):
        d = json.loads(json.dumps(heat.to_dict()))
        assert d["kind"] == "nu" and len(d["pairings"]) == 3
        rows = heat.csv_rows()
        assert len(rows) == 3 * 8
        assert list(rows[0]) == ["parameter", "source_id", "pairing", "gap", "dissipation", "flag"]


class TestSweepDelta:
    def test_shear_converges_to_transport(self):
        g = TorusGrid(32)
        deltas = [2.0 ** -2, 2.0 ** -3, 2.0 ** -4]
        rec = sweep_delta(SHEAR, None, SingleMode(), deltas, g, steps=128)
        nodes = regularized_nodes(1.0, source_breakpoints(PANEL), 128)

        def weight(src):
            return lambda t, a, b: src.time_profile(t) * src.space_profile(a, b)

        rows = pushforward_pairings(SHEAR, SingleMode(), g, nodes, [weight(s) for s in PANEL])
        exact = np.array([np.trapezoid(rows[:, j], nodes) for j in range(8)])
        errs = [np.max(np.abs(p - exact)) for p in rec.pairings]
        assert np.all(np.diff(errs) < 0), errs

    def test_constant_datum(self):
        g = TorusGrid(16)
        rec = sweep_delta(build_dyadic_exchange(1, 2), None, ConstantDatum(2.0), [0.25, 0.125], g, steps=64)
        assert np.max(np.abs(rec.pairings[0] - rec.pairings[1])) <= 1e-14
        assert rec.dissipation is None
        with pytest.raises(ValueError):
            dissipation_meter(rec)


class TestDuality:
    def test_discrete_adjoint_report(self):
        g = TorusGrid(32)
        spec = SteadyStream()
        src = PANEL[1]
        cfg = SolveConfig.build(spec, g, 0.05, scheme="spectral-galerkin", sources=[src])
        rho = ScalarGridField(g, np.random.default_rng(3).standard_normal((32, 32)))
        rep = duality_from_pair(adjoint_mode_pair(spec, rho, src, 0.05, cfg))
        assert rep.mode == "discrete-adjoint" and rep.rel_gap <= 1e-10

    def _independent(self, n, spec, chi):
        g = TorusGrid(n)
        nu = 0.05
        cfg = SolveConfig.build(spec, g, nu, sources=[chi], interpolation="cubic", max_dt=1 / 256)
        fwd = solve_forward(spec, SingleMode(1, 1, phase=0.4), with_outputs_covering(cfg, chi))
        bwd = solve_backward_diffusive(spec, chi, nu, with_outputs_covering(cfg, chi))
        return duality_check(fwd, bwd, SingleMode(1, 1, phase=0.4), chi)

    def test_zero_source(self):
        chi = SourceSpec(0.5, (0.5, 0.5), 0.2, 0.2, amplitude=0.0)
        rep = self._independent(16, SHEAR, chi)
        assert rep.lhs == 0 and rep.rhs == 0 and rep.mode == "independent"

    def test_independent_order(self):
        chi = PANEL[1]
        gaps = [self._independent(n, SteadyStream(), chi).abs_gap for n in (32, 64, 128)]
        orders = np.log2(np.array(gaps[:-1]) / np.array(gaps[1:]))
        assert np.all(orders >= 1.5), orders

    def test_missing_nodes(self):
        g = TorusGrid(16)
        chi = PANEL[0]
        cfg = SolveConfig.build(SHEAR, g, 0.05, sources=[chi])
        fwd = solve_forward(SHEAR, SingleMode(), cfg)
        bwd = solve_backward_diffusive(SHEAR, chi, 0.05, with_outputs_covering(cfg, chi))
        with pytest.raises(ValueError, match="missing"):
            duality_check(fwd, bwd, SingleMode(), chi)

    def test_regularized_refinement(self):
        chi = PANEL[1]
        gaps = [regularized_duality(SteadyStream(), None, 0.1, SingleMode(1, 1, phase=0.4), chi, TorusGrid(n),
                                    steps=s).abs_gap for n, s in ((32, 64), (64, 128), (128, 256))]
        assert gaps[0] >= 2 * gaps[1] and gaps[1] >= 2 * gaps[2], gaps


class TestWeakResidual:
    @pytest.fixture(scope="class")
    @classmethod
    def shear_traj(cls):
        # trapezoid error in time is O(dt^2); the t0 = 0 test function needs dt = 1/1024
        g = TorusGrid(64)
        cfg = SolveConfig.build(SHEAR, g, 0.0, scheme="characteristics", max_dt=1 / 1024)
        cfg = SolveConfig(0.0, g, cfg.time_nodes, "characteristics", output_times=tuple(cfg.time_nodes))
        return solve_forward(SHEAR, SingleMode(), cfg)

    def test_exact_shear(self, shear_traj):
        panel = default_test_panel(0.0)[:2] + [TestFunctionSpec(0.0, (0.5, 0.5), 0.4, 0.3)]
        rep = weak_residual(shear_traj, SHEAR, SingleMode(), panel)
        assert max(rep.finest_relative) <= 1e-6
        assert len(rep.levels) >= 3

    def test_zero(self):
        g = TorusGrid(16)
        cfg = SolveConfig.build(SHEAR, g, 0.0, scheme="characteristics")
        cfg = SolveConfig(0.0, g, cfg.time_nodes, "characteristics", output_times=tuple(cfg.time_nodes))
        traj = solve_forward(SHEAR, ConstantDatum(0.0), cfg)
        rep = weak_residual(traj, SHEAR, ConstantDatum(0.0), default_test_panel(0.0))
        assert all(r == 0.0 for row in rep.series for r in row)

    def test_corrupted(self, shear_traj):
        panel = default_test_panel(0.0)[:2]
        clean = weak_residual(shear_traj, SHEAR, SingleMode(), panel)
        k = int(np.argmin(np.abs(np.array(shear_traj.times) - panel[0].t0)))
        bad = weak_residual(corrupt_snapshot(shear_traj, k), SHEAR, SingleMode(), panel)
        assert max(b / c for b, c in zip(bad.finest, clean.finest)) >= 10

    def test_support_error(self, shear_traj):
        phi = TestFunctionSpec(0.5, (0.5, 0.5), 0.2, 0.2, side="backward")
        with pytest.raises(ValueError):
            weak_residual(shear_traj, SHEAR, SingleMode(), [phi])

    def test_needs_three_levels(self, shear_traj):
        with pytest.raises(ValueError):
            weak_residual(shear_traj, SHEAR, SingleMode(), default_test_panel(0.0), levels=((2, 1), (1, 2)))


class TestDepauw:
    @pytest.fixture(scope="class")
    @classmethod
    def report(cls):
        return depauw_nonuniqueness_demo(3, TorusGrid(64))

    def test_exchange(self, report):
        assert all(report.exchange_exact.values()) and len(report.exchange_exact) == 3

    def test_separation(self, report):
        assert abs(report.separation_l2 - 1.0) <= 1e-12
        assert report.vanishing_diffusivity_l2 == 0.0

    def test_weak_star_decay(self, report):
        vals = [report.weak_star_pairings[n] for n in sorted(report.weak_star_pairings)]
        assert all(b < a for a, b in zip(vals[:-1], vals[1:]))

    def test_residual_sensitivity(self, report):
        assert report.residual_ratio >= 10 and report.passed
        json.dumps(report.to_dict())

    def test_solution_values(self):
        g = TorusGrid(64)
        traj = depauw_solution(build_dyadic_exchange(1, 3), g)
        for n in (1, 2, 3):
            assert np.array_equal(traj.at(2.0 ** -n).values, checkerboard(n, g).values)
        assert np.all(traj.at(0.0).values == 0)

    def test_resolution(self):
        with pytest.raises(ValueError, match="resolution"):
            depauw_solution(build_dyadic_exchange(1, 4), TorusGrid(32))

    def test_panel_truncation(self):
        with pytest.raises(ValueError):
            depauw_nonuniqueness_demo(3, TorusGrid(64), [TestFunctionSpec(0.1, (0.5, 0.5), 0.05, 0.2)])


class TestRecovery:
    def test_heat_deficit(self):
        g = TorusGrid(32)
        t = 2.0 ** -3
        rec = sweep_nu(ZeroField(), SingleMode(), NUS, g, early_times=(t,), diffusion="spectral")
        rep = l2_recovery_check(rec, t)
        norm0 = math.sqrt(0.5)
        for nu, d in zip(NUS, rep.deficits):
            assert d == pytest.approx(norm0 * (1 - math.exp(-4 * math.pi ** 2 * nu * t)), rel=1e-8)
        assert rep.decreasing

    def test_constant(self):
        t = 0.25
        rec = sweep_nu(SHEAR, ConstantDatum(1.5), [0.1, 0.08], TorusGrid(16), early_times=(t,))
        assert all(abs(d) <= 1e-12 for d in l2_recovery_check(rec, t).deficits)

    def test_missing_time(self):
        rec = sweep_nu(SHEAR, ConstantDatum(1.5), [0.1, 0.08], TorusGrid(16))
        with pytest.raises(ValueError):
            l2_recovery_check(rec, 0.25)


class TestBackwardProbe:
    @pytest.mark.parametrize("spec", [ZeroField(), SHEAR])
    def test_smooth_continuity(self, spec):
        g = TorusGrid(32)
        chi = PANEL[1]
        rep = backward_strong_discontinuity_probe(spec, chi, [0.05], g, times=[2.0 ** -k for k in range(2, 7)])
        row = rep.gaps[0]
        assert all(b < a for a, b in zip(row[:-1], row[1:]))
        assert row[-1] <= 0.1 * row[0]

    def test_dyadic_reports(self):
        rep = backward_strong_discontinuity_probe(build_dyadic_exchange(1, 3), PANEL[0], [0.05, 0.03],
                                                  TorusGrid(32))
        assert len(rep.gaps) == 2 and all(math.isfinite(x) for row in rep.gaps for x in row)
        json.dumps(rep.to_dict())
