import json

import numpy as np
import pytest

from vanishlab.cli import EXIT_ABORT, EXIT_INVALID, EXIT_OK, main
from vanishlab.config import parse
from vanishlab.io import read_fields, write_fields
from vanishlab.runner import MANIFEST, execute, verify_manifest
from vanishlab.torus import ScalarGridField, TorusGrid

SOLVE = "[run]\nkind:str = solve\n[grid]\nn:int = 32\n[field]\ntype:str = zero\n[solver]\nnu:float = 0.05\n"
SWEEP = ("[run]\nkind:str = sweep-nu\nseed:int = 3\n[grid]\nn:int = 32\n[field]\ntype:str = shear\n"
         "[sweep]\nnus:floats = 0.0625, 0.03125, 0.015625\n")


def _run(tmp_path, text, name="out", *extra):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(text)
    out = tmp_path / name
    return main([str(cfg), "--output", str(out), "-q", *extra]), out


def _manifest(out):
    return json.loads((out / MANIFEST).read_text())


def test_minimal_solve(tmp_path):
    rc, out = _run(tmp_path, SOLVE)
    assert rc == EXIT_OK
    man = _manifest(out)
    assert man["kind"] == "solve" and man["truncation"] is None
    assert [n for n in man["files"] if n.endswith(".bin")] == ["fields.bin"]
    snaps = read_fields(out / "fields.bin")
    assert len(snaps) == 1 and snaps[0].grid.n_cells == 32
    assert verify_manifest(out) == []
    assert (out / "timing.json").is_file()
    assert "timing.json" not in man["files"]


def test_outputs_stay_in_directory(tmp_path):
    rc, out = _run(tmp_path, SOLVE)
    assert rc == EXIT_OK
    written = {p.name for p in tmp_path.iterdir()}
    assert written == {"out.ini", "out"}


def test_guard_exit_2(tmp_path, capsys):
    rc, out = _run(tmp_path, SOLVE.replace("0.05", "0.001"))
    assert rc == EXIT_INVALID
    assert "resolution guard" in capsys.readouterr().err
    assert not out.exists()


def test_bad_config_exit_2(tmp_path, capsys):
    rc, _ = _run(tmp_path, SOLVE + "bogus:int = 1\n")
    assert rc == EXIT_INVALID
    assert "solver.bogus" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert main([str(tmp_path / "nope.ini"), "-q"]) == EXIT_INVALID


def test_jobs_zero(tmp_path):
    rc, _ = _run(tmp_path, SOLVE, "out", "--jobs", "0")
    assert rc == EXIT_INVALID


def test_override_not_applicable(tmp_path):
    rc, _ = _run(tmp_path, "[run]\nkind:str = depauw-demo\n[grid]\nn:int = 32\n", "d", "--allow-underresolved")
    assert rc == EXIT_INVALID


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(tmp_path, capsys):
    write_fields(tmp_path / "huge.bin", [ScalarGridField(TorusGrid(32), np.full((32, 32), 1e308))])
    text = SOLVE + "diffusion:str = spectral\n[datum]\ntype:str = file\npath:str = huge.bin\n"
    text = text.replace("nu:float = 0.05", "nu:float = 0.05\n")
    rc, out = _run(tmp_path, text.replace("[field]\ntype:str = zero", "[field]\ntype:str = shear"))
    assert rc == EXIT_ABORT
    err = capsys.readouterr().err
    assert "numerical abort" in err and "t=" in err
    assert not out.exists()


def test_file_datum_grid_mismatch(tmp_path):
    write_fields(tmp_path / "d.bin", [ScalarGridField(TorusGrid(16), np.zeros((16, 16)))])
    rc, _ = _run(tmp_path, SOLVE + "[datum]\ntype:str = file\npath:str = d.bin\n")
    assert rc == EXIT_INVALID


def test_repeat_identical(tmp_path):
    rc1, a = _run(tmp_path, SWEEP, "a")
    rc2, b = _run(tmp_path, SWEEP, "b", "--jobs", "2")
    assert rc1 == rc2 == EXIT_OK
    assert (a / MANIFEST).read_bytes() == (b / MANIFEST).read_bytes()
    for name in _manifest(a)["files"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_echo_reproduces(tmp_path):
    rc, a = _run(tmp_path, SWEEP, "a")
    echoed = _manifest(a)["config"]
    rc2, b = _run(tmp_path, echoed, "b")
    assert rc == rc2 == EXIT_OK
    assert _manifest(a)["files"] == _manifest(b)["files"]
    assert parse(echoed) == parse(SWEEP)


def test_tamper_detected(tmp_path):
    _, out = _run(tmp_path, SOLVE)
    p = out / "ledger.csv"
    p.write_text(p.read_text() + "\n")
    (out / "fields.bin").unlink()
    assert sorted(verify_manifest(out)) == ["fields.bin", "ledger.csv"]


def test_allow_underresolved_flags(tmp_path):
    text = SWEEP.replace("0.015625", "0.0078125")
    rc, _ = _run(tmp_path, text, "a")
    assert rc == EXIT_INVALID
    rc, out = _run(tmp_path, text, "b", "--allow-underresolved")
    assert rc == EXIT_OK
    rows = (out / "sweep.csv").read_text().splitlines()
    assert any(r.endswith("under-resolved") for r in rows)
    assert 'class="under-resolved"' in (out / "pairings.svg").read_text()
    assert "allow_underresolved:bool = true" in _manifest(out)["config"]


def test_depauw_manifest_truncation(tmp_path):
    rc, out = _run(tmp_path, "[run]\nkind:str = depauw-demo\n[grid]\nn:int = 32\n[field]\nn_max:int = 2\n", "d")
    assert rc == EXIT_OK
    man = _manifest(out)
    assert man["truncation"] == {"n_min": 1, "n_max": 2, "activation_time": 0.125}
    assert man["summary"]["separation_l2"] == 1.0


def test_execute_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    outcome = execute(parse(SOLVE))
    assert "fields.bin" in outcome.files and "config.echo" in outcome.files
    assert list(tmp_path.iterdir()) == []
