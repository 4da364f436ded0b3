import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanishlab.evolve import (
    NumericalAbort,
    SolveConfig,
    adjoint_mode_pair,
    build_time_nodes,
    solve_backward_diffusive,
    solve_backward_regularized,
    solve_forward,
    solve_forward_regularized,
)
from vanishlab.torus import ConstantDatum, ScalarGridField, SingleMode, SourceSpec, TorusGrid, norm_l2
from vanishlab.velocity import (
    MollifierSpec,
    SineProfile,
    SteadyShear,
    SteadyStream,
    ZeroField,
    build_dyadic_exchange,
    checkerboard,
)

SHEAR = SteadyShear(0, SineProfile())
BUMP = SourceSpec(0.5, (0.5, 0.5), 0.1, 0.2)


def shear_exact(t):
    return lambda x1, x2: np.cos(2 * np.pi * (x1 - t * np.sin(2 * np.pi * x2)))


def random_field(grid, seed):
    return ScalarGridField(grid, np.random.default_rng(seed).standard_normal((grid.n_cells,) * 2))


class TestConfig:
    def test_nodes_contain_slab_boundaries(self):
        spec = build_dyadic_exchange(1, 4)
        nodes = build_time_nodes(spec, TorusGrid(32))
        for b in (1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0):
            assert np.any(nodes == b)

    def test_cfl_rejected_not_subdivided(self):
        g = TorusGrid(32)
        cfg = SolveConfig(0.01, g, np.linspace(0, 1, 5))
        with pytest.raises(ValueError, match="CFL"):
            solve_forward(SHEAR, SingleMode(), cfg)

    def test_missing_breakpoint_rejected(self):
        g = TorusGrid(16)
        spec = build_dyadic_exchange(1, 2)
        nodes = build_time_nodes(spec, g)
        cfg = SolveConfig(0.1, g, nodes[nodes != 0.5])
        with pytest.raises(ValueError):
            solve_forward(spec, checkerboard(1, g), cfg)

    @pytest.mark.parametrize("kw", [dict(nu=-1.0), dict(scheme="upwind"), dict(cfl=1.5),
                                    dict(interpolation="quintic"), dict(diffusion="implicit")])
    def test_bad_parameters(self, kw):
        base = dict(nu=0.1, grid=TorusGrid(8), time_nodes=np.linspace(0, 1, 3))
        base.update(kw)
        with pytest.raises(ValueError):
            SolveConfig(**base)

    def test_output_must_be_node(self):
        with pytest.raises(ValueError):
            SolveConfig(0.1, TorusGrid(8), np.linspace(0, 1, 3), output_times=(0.3,))

    def test_pure_transport_refused_without_flow(self):
        g = TorusGrid(16)
        with pytest.raises(ValueError, match="pure transport"):
            solve_forward(SteadyStream(), SingleMode(), SolveConfig.build(SteadyStream(), g, 0.0))


class TestForward:
    def test_heat_decay(self):
        g = TorusGrid(64)
        cfg = SolveConfig.build(ZeroField(), g, 0.01, max_dt=1 / 256, diffusion="spectral")
        traj = solve_forward(ZeroField(), SingleMode(), cfg)
        amp = traj.final.values / SingleMode().sample(g).values
        expect = math.exp(-4 * math.pi ** 2 * 0.01)
        assert np.max(np.abs(amp / expect - 1)) <= 1e-6

    def test_shear_exact_transport(self):
        g = TorusGrid(32)
        outs = (0.25, 0.5, 1.0)
        cfg = SolveConfig.build(SHEAR, g, 0.0, scheme="characteristics", output_times=outs)
        traj = solve_forward(SHEAR, SingleMode(), cfg)
        for t in outs:
            ref = g.sample(shear_exact(t)).values
            assert np.max(np.abs(traj.at(t).values - ref)) <= 1e-12

    def test_constant_datum(self):
        g = TorusGrid(16)
        spec = build_dyadic_exchange(1, 2)
        cfg = SolveConfig.build(spec, g, 0.05, output_times=(0.25, 0.5, 1.0))
        traj = solve_forward(spec, ConstantDatum(2.5), cfg)
        for s in traj.snapshots:
            assert np.max(np.abs(s.values - 2.5)) <= 1e-12
        assert np.max(np.abs(traj.ledger.l2_sq - 6.25)) <= 1e-10
        assert np.max(np.abs(traj.ledger.grad_energy_cum)) <= 1e-20

    def test_first_snapshot_is_datum(self):
        g = TorusGrid(16)
        rho = random_field(g, 0)
        traj = solve_forward(SHEAR, rho, SolveConfig.build(SHEAR, g, 0.02))
        assert traj.snapshots[0] is rho
        assert set(traj.times) <= set(traj.ledger.times.tolist())

    @pytest.mark.parametrize("spec", [build_dyadic_exchange(1, 3), SteadyStream(), SHEAR])
    def test_invariants_monotone(self, spec):
        g = TorusGrid(32)
        rho = random_field(g, 7)
        traj = solve_forward(spec, rho, SolveConfig.build(spec, g, 0.01, output_times=(0.125, 0.5, 1.0)))
        assert traj.checks == {"max_principle": True, "mass": True, "energy_inequality": True}
        lo, hi = rho.values.min(), rho.values.max()
        for s in traj.snapshots:
            assert s.values.min() >= lo and s.values.max() <= hi
            assert abs(s.mean() - rho.mean()) <= 1e-10 * np.max(np.abs(rho.values))
        assert np.all(np.diff(traj.ledger.grad_energy_cum) >= 0)
        assert np.all(traj.ledger.l2_sq >= 0)

    @settings(max_examples=10, deadline=None)
    @given(nu=st.floats(1e-3, 0.2), seed=st.integers(0, 2 ** 16))
    def test_energy_inequality_cubic(self, nu, seed):
        g = TorusGrid(16)
        spec = SteadyStream()
        cfg = SolveConfig.build(spec, g, nu, interpolation="cubic")
        traj = solve_forward(spec, random_field(g, seed), cfg)
        assert traj.checks["mass"] and traj.checks["energy_inequality"]

    def test_splitting_order(self):
        errs = []
        for n in (32, 64, 128):
            g = TorusGrid(n)
            cfg = SolveConfig.build(SHEAR, g, 0.0, interpolation="cubic", output_times=(0.5,), max_dt=1 / 16)
            traj = solve_forward(SHEAR, SingleMode().sample(g), cfg)
            errs.append(norm_l2(traj.at(0.5).with_values(traj.at(0.5).values - g.sample(shear_exact(0.5)).values)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 1.5), orders

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort(self):
        g = TorusGrid(8)
        # overflow in the spectral transform produces non-finite values mid-run
        rho = ScalarGridField(g, np.full((8, 8), 1e308))
        cfg = SolveConfig.build(ZeroField(), g, 0.1, diffusion="spectral", output_times=(0.5,))
        with pytest.raises(NumericalAbort) as info:
            solve_forward(ZeroField(), rho, cfg)
        assert info.value.time > 0 and "solve_forward" in str(info.value)

    def test_deterministic(self):
        g = TorusGrid(32)
        spec = build_dyadic_exchange(1, 3)
        cfg = SolveConfig.build(spec, g, 0.02)
        a = solve_forward(spec, checkerboard(1, g), cfg)
        b = solve_forward(spec, checkerboard(1, g), cfg)
        assert np.array_equal(a.final.values, b.final.values)


class TestBackward:
    def test_zero_source(self):
        g = TorusGrid(16)
        traj = solve_backward_diffusive(SHEAR, SourceSpec(0.5, (0.5, 0.5), 0.1, 0.2, amplitude=0.0), 0.05,
                                        SolveConfig.build(SHEAR, g, 0.05))
        assert all(np.all(s.values == 0) for s in traj.snapshots)

    @pytest.mark.parametrize("spec", [SHEAR, build_dyadic_exchange(1, 3), SteadyStream()])
    def test_bounds(self, spec):
        g = TorusGrid(32)
        cfg = SolveConfig.build(spec, g, 0.02, sources=[BUMP], output_times=(0.0, 0.25, 0.5, 1.0))
        traj = solve_backward_diffusive(spec, BUMP, 0.02, cfg)
        assert traj.checks["sup_bound"] and traj.checks["energy_bound"]
        assert traj.checks["sup_bound_value"] == pytest.approx(BUMP.sup_time_integral())
        # amplitude times the time integral of the time profile
        assert BUMP.sup_time_integral() == pytest.approx(0.1 * 0.44399381616807943 * math.e, rel=1e-12)
        assert traj.times[0] == 1.0 and np.all(traj.snapshots[0].values == 0)

    def test_needs_positive_nu(self):
        g = TorusGrid(16)
        with pytest.raises(ValueError):
            solve_backward_diffusive(SteadyStream(), BUMP, 0.0, SolveConfig.build(SteadyStream(), g, 0.0))


class TestAdjoint:
    @pytest.mark.parametrize("seed", range(4))
    def test_gap(self, seed):
        g = TorusGrid(32)
        spec = SteadyStream()
        cfg = SolveConfig.build(spec, g, 0.05, scheme="spectral-galerkin", sources=[BUMP])
        pair = adjoint_mode_pair(spec, random_field(g, seed), BUMP, 0.05, cfg)
        assert pair.gap <= 1e-10 * pair.scale

    def test_zero_sides(self):
        g = TorusGrid(16)
        spec = SteadyStream()
        cfg = SolveConfig.build(spec, g, 0.05, scheme="spectral-galerkin", sources=[BUMP])
        p = adjoint_mode_pair(spec, ScalarGridField(g, np.zeros((16, 16))), BUMP, 0.05, cfg)
        assert p.lhs == 0 and p.rhs == 0
        zero_chi = SourceSpec(0.5, (0.5, 0.5), 0.1, 0.2, amplitude=0.0)
        p = adjoint_mode_pair(spec, random_field(g, 1), zero_chi, 0.05, cfg)
        assert p.lhs == 0 and p.rhs == 0

    def test_rejects_limited_scheme(self):
        g = TorusGrid(16)
        with pytest.raises(ValueError, match="spectral-galerkin"):
            adjoint_mode_pair(SHEAR, SingleMode(), BUMP, 0.05, SolveConfig.build(SHEAR, g, 0.05))


class TestRegularized:
    def test_zero_field_identity(self):
        g = TorusGrid(16)
        rho = random_field(g, 3)
        traj = solve_forward_regularized(ZeroField(), None, 0.1, rho, (0.0, 0.3, 1.0))
        for s in traj.snapshots:
            assert np.array_equal(s.values, rho.values)

    def test_shear_convergence_in_delta(self):
        g = TorusGrid(32)
        errs = []
        for d in (2.0 ** -3, 2.0 ** -4, 2.0 ** -5, 2.0 ** -6):
            traj = solve_forward_regularized(SHEAR, MollifierSpec(), d, SingleMode(), (0.5,), grid=g)
            diff = traj.at(0.5).values - g.sample(shear_exact(0.5)).values
            errs.append(norm_l2(g.sample(lambda a, b: 0 * a).with_values(diff)))
        assert np.all(np.diff(errs) < 0), errs

    # the mean is a midpoint rule for rho_in o X, so the grid must resolve X
    @pytest.mark.parametrize("spec,n,delta", [(SteadyStream(), 32, 0.1), (build_dyadic_exchange(1, 3), 128, 0.25)])
    def test_pushforward_mean(self, spec, n, delta):
        g = TorusGrid(n)
        traj = solve_forward_regularized(spec, None, delta, SingleMode(1, 1, phase=0.3), (0.5, 1.0), grid=g)
        mean0 = float(np.mean(SingleMode(1, 1, phase=0.3).sample(g).values))
        for s in traj.snapshots:
            assert abs(s.mean() - mean0) <= 1e-8

    def test_sup_bound_grid_datum(self):
        g = TorusGrid(32)
        traj = solve_forward_regularized(build_dyadic_exchange(1, 3), None, 0.1, checkerboard(1, g), (0.5, 1.0))
        assert traj.checks["sup_bound"]

    def test_backward_terminal_zero(self):
        g = TorusGrid(16)
        traj = solve_backward_regularized(SteadyStream(), None, 0.1, BUMP, (1.0, 0.0), grid=g, steps=64)
        assert np.all(traj.at(1.0).values == 0)
        assert traj.checks["sup_bound"]

    def test_backward_zero_field(self):
        g = TorusGrid(16)
        traj = solve_backward_regularized(ZeroField(), None, 0.1, BUMP, (0.0, 0.5), grid=g, steps=512)
        x1, x2 = g.centers()
        space = BUMP.space_profile(x1, x2)
        for t in (0.0, 0.5):
            ref = BUMP.time_integral_from(t) * space
            assert np.max(np.abs(traj.at(t).values - ref)) <= 1e-4 * np.max(np.abs(space))

    def test_backward_sup_bound_dyadic(self):
        g = TorusGrid(16)
        traj = solve_backward_regularized(build_dyadic_exchange(1, 3), None, 0.1, BUMP, (0.0, 0.25), grid=g,
                                          steps=64)
        assert traj.checks["sup_bound"]
