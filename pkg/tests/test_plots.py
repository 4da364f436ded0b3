import math
import re

import numpy as np
import pytest

from vanishlab import plots
from vanishlab.torus import SingleMode, TorusGrid
from vanishlab.vanishing import SweepRecord, sweep_nu
from vanishlab.velocity import ZeroField

NUS = [2.0 ** -i for i in range(1, 7)]


def _points(svg):
    return [[tuple(map(float, p.split(","))) for p in m.split()]
            for m in re.findall(r'<polyline points="([^"]+)"', svg)]


@pytest.fixture(scope="module")
def heat_sweep():
    return sweep_nu(ZeroField(), SingleMode(), NUS, TorusGrid(32), max_dt=1 / 64, diffusion="spectral")


def test_one_curve_per_source(heat_sweep):
    svg = plots.sweep_pairings_svg(heat_sweep)
    assert svg.count("<svg") == 1
    curves = _points(svg)
    assert len(curves) == 8 and all(len(c) == 6 for c in curves)
    assert "nu (log)" in svg


def test_heat_dissipation_monotone(heat_sweep):
    svg = plots.dissipation_svg(heat_sweep.params, heat_sweep.dissipation, heat_sweep.flags)
    (curve,) = _points(svg)
    px = [p[0] for p in curve]
    py = [p[1] for p in curve]
    # nu decreases leftwards on the log axis; smaller D sits lower (larger y)
    assert all(b < a for a, b in zip(px, px[1:]))
    assert all(b >= a for a, b in zip(py, py[1:])) and py[-1] > py[0]
    assert all(b < a for a, b in zip(heat_sweep.dissipation, heat_sweep.dissipation[1:]))
    ref = [(1 - math.exp(-8 * math.pi ** 2 * nu)) / 4 for nu in NUS]
    assert np.allclose(heat_sweep.dissipation, ref, rtol=1e-6)


def test_flagged_points_marked():
    rec = SweepRecord("nu", [0.1, 0.05, 0.025], np.ones((3, 2)), [0.0, 0.0],
                      ["resolved", "resolved", "under-resolved"], None, [], 16)
    svg = plots.sweep_pairings_svg(rec)
    assert svg.count('class="under-resolved"') == 2
    assert "under-resolved</text>" in svg


def test_unflagged_has_no_marker(heat_sweep):
    assert "under-resolved" not in plots.sweep_pairings_svg(heat_sweep)


def test_deterministic(heat_sweep):
    assert plots.sweep_gaps_svg(heat_sweep) == plots.sweep_gaps_svg(heat_sweep)
    assert "gap (log)" in plots.sweep_gaps_svg(heat_sweep)


def test_ledger_budget_curve():
    led = {"times": [0.0, 0.5, 1.0], "l2_sq": [1.0, 0.6, 0.4], "grad_energy_cum": [0.0, 0.4, 0.6]}
    curves = _points(plots.ledger_svg(led))
    assert len(curves) == 2
    # the budget curve is flat at the initial energy
    assert len({p[1] for p in curves[1]}) == 1


def test_nonfinite_points_skipped():
    svg = plots.line_plot([plots.Series("s", [1, 2, 3], [1.0, float("nan"), 3.0])], title="t", xlabel="x",
                          ylabel="y")
    assert len(_points(svg)[0]) == 2
    assert "nan" not in svg.lower()


def test_log_ticks_powers_of_two():
    assert plots._tick_label(2.0 ** -6) == "2^-6"
    assert plots._tick_label(0.3) == "0.3"
