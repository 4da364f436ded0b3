import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vanishlab.config import ConfigError, echo, load, parse, resolve
from vanishlab.evolve import SolveConfig, solve_forward
from vanishlab.io import (
    FormatError,
    decode_fields,
    encode_fields,
    field_csv,
    read_field_csv,
    read_fields,
    table_csv,
    trajectory_sidecar,
    write_fields,
)
from vanishlab.torus import ScalarGridField, SingleMode, TorusGrid
from vanishlab.velocity import ZeroField


def _field(n, seed=0):
    return ScalarGridField(TorusGrid(n), np.random.default_rng(seed).standard_normal((n, n)))


class TestBinary:
    @settings(max_examples=20, deadline=None)
    @given(vals=arrays(np.float64, (2, 8, 8), elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_roundtrip(self, vals):
        fields = [ScalarGridField(TorusGrid(8), v) for v in vals]
        back = decode_fields(encode_fields(fields))
        assert len(back) == 2
        for a, b in zip(fields, back):
            assert np.array_equal(a.values, b.values)

    def test_header_layout(self):
        blob = encode_fields([_field(4), _field(4, 1), _field(4, 2)])
        assert blob[:4] == b"VLAB"
        assert struct.unpack_from("<III", blob, 4) == (1, 4, 3)
        assert len(blob) == 16 + 3 * 16 * 8

    def test_file_roundtrip(self, tmp_path):
        f = _field(16)
        write_fields(tmp_path / "a.bin", [f])
        assert np.array_equal(read_fields(tmp_path / "a.bin")[0].values, f.values)

    @pytest.mark.parametrize("mutate, msg", [
        (lambda b: b"XLAB" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:-8], "bytes"),
        (lambda b: b[:10], "truncated"),
    ])
    def test_malformed(self, mutate, msg):
        with pytest.raises(FormatError, match=msg):
            decode_fields(mutate(encode_fields([_field(4)])))

    def test_mixed_grids(self):
        with pytest.raises(ValueError):
            encode_fields([_field(4), _field(8)])
        with pytest.raises(ValueError):
            encode_fields([])


class TestCsv:
    def test_field_roundtrip(self):
        f = _field(8, 3)
        text = field_csv(f)
        assert text.splitlines()[0] == "i,j,x1,x2,value"
        assert np.array_equal(read_field_csv(text).values, f.values)

    def test_field_not_square(self):
        text = "\n".join(field_csv(_field(4)).splitlines()[:-1])
        with pytest.raises(FormatError):
            read_field_csv(text)

    def test_table(self):
        text = table_csv(["a", "b"], [(1, 0.1), ("x", np.float64(1 / 3))])
        assert text == "a,b\n1,0.1\nx,0.3333333333333333\n"


def test_sidecar():
    traj = solve_forward(ZeroField(), SingleMode(), SolveConfig.build(ZeroField(), TorusGrid(16), 0.1,
                                                                      output_times=(0.5, 1.0)))
    side = trajectory_sidecar(traj)
    assert side["direction"] == "forward"
    assert side["times"] == [float(t) for t in traj.times]
    assert len(side["ledger"]["l2_sq"]) == len(side["ledger"]["times"])
    assert all(side["checks"].values())


BASIC = """
[run]
kind:str = sweep-nu
seed:int = 7

[grid]
n:int = 64

[field]
type:str = dyadic-exchange
n_max:int = 3

[datum]
type:str = checkerboard
level:int = 1

[sweep]
nus:floats = 0.0625, 0.03125
"""


class TestConfig:
    def test_defaults_resolved(self):
        c = parse(BASIC)
        assert c.kind == "sweep-nu" and c["run"]["seed"] == 7
        assert c["field"]["n_min"] == 1 and c["field"]["orientation"] == "xy"
        assert c["sweep"]["nus"] == (0.0625, 0.03125)
        assert "nu" not in c["solver"]
        assert "mc" not in c.sections

    def test_echo_fixed_point(self):
        c = parse(BASIC)
        text = echo(c)
        assert parse(text) == c
        assert echo(parse(text)) == text

    @pytest.mark.parametrize("kind", ["solve", "duality", "depauw-demo", "mc-estimate", "check-weak",
                                      "backward-probe", "sweep-delta", "dissipation"])
    def test_echo_fixed_point_all_kinds(self, kind):
        extra = "\n[solver]\nscheme:str = spectral-galerkin\n" if kind == "duality" else ""
        c = parse(f"[run]\nkind:str = {kind}\n{extra}")
        assert parse(echo(c)) == c

    def test_echo_omit(self):
        assert "output" not in echo(parse(BASIC), omit=("run.output",))

    def test_load(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text(BASIC)
        assert load(p) == parse(BASIC)
        with pytest.raises(ConfigError, match="cannot read"):
            load(tmp_path / "missing.ini")

    def test_n_max_default(self):
        c = parse("[run]\nkind:str = depauw-demo\n[grid]\nn:int = 128\n")
        assert c["field"]["n_max"] == 5

    @pytest.mark.parametrize("text, path", [
        ("[run]\nseed:int = 1\n", "run.kind"),
        ("[run]\nkind:str = solve\n[bogus]\na:int = 1\n", "bogus"),
        ("[run]\nkind:str = solve\nfoo:int = 1\n", "run.foo"),
        ("[run]\nkind:str = solve\nseed:float = 1\n", "run.seed"),
        ("[run]\nkind:str = solve\nseed:int = x\n", "run.seed"),
        ("[run]\nkind:str = solve\nseed = 1\n", "run.seed"),
        ("[run]\nkind:str = solve\nseed:int = -1\n", "run.seed"),
        ("[run]\nkind:str = solve\n[grid]\nn:int = 48\n", "grid.n"),
        ("[run]\nkind:str = solve\n[field]\ntype:str = zero\nn_max:int = 2\n", "field.n_max"),
        ("[run]\nkind:str = solve\n[sweep]\nnus:floats = 0.1\n", "sweep.nus"),
        ("[run]\nkind:str = depauw-demo\n[mc]\nsamples:int = 100\n", "mc.samples"),
        ("[run]\nkind:str = duality\n", "solver.scheme"),
        ("[run]\nkind:str = depauw-demo\n[field]\ntype:str = zero\n", "field.type"),
        ("[run]\nkind:str = solve\n[grid]\nn:int = 32\n[field]\ntype:str = dyadic-exchange\nn_max:int = 4\n",
         "field.n_max"),
        ("[run]\nkind:str = solve\n[solver]\nnu:float = nan\n", "solver.nu"),
        ("[run]\nkind:str = solve\n[solver]\noutputs:floats = 2.0\n", "solver.outputs"),
        ("[run]\nkind:str = sweep-nu\n[sweep]\nnus:floats = \n", "sweep.nus"),
        ("[run]\nkind:str = check-weak\n[weak]\nstrides:ints = 2, 1\n", "weak.refinements"),
        ("[run]\nkind:str = solve\n[datum]\ntype:str = file\n", "datum.path"),
    ])
    def test_errors_name_key(self, text, path):
        with pytest.raises(ConfigError) as info:
            parse(text)
        assert info.value.path == path

    def test_resolve_coerces_and_rejects(self):
        c = resolve({"run": {"kind": "solve"}, "solver": {"nu": 1}})
        assert c["solver"]["nu"] == 1.0 and isinstance(c["solver"]["nu"], float)
        with pytest.raises(ConfigError, match="expected int"):
            resolve({"run": {"kind": "solve", "seed": 1.5}})

    def test_replace(self):
        c = parse(BASIC).replace("sweep", "allow_underresolved", True)
        assert c["sweep"]["allow_underresolved"] is True
