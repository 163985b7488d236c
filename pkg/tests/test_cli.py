import csv
import json

import pytest

from hodge_afem.cli import main
from hodge_afem.mesh import load_mesh


def _run(tmp_path, *argv):
    return main([argv[0], "--out", str(tmp_path), "--quiet", *argv[1:]])


def test_run_writes_outputs(tmp_path):
    assert _run(tmp_path, "run", "--case", "Y1", "--eps", "0.5") == 0
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert rows and rows[0]["schema_version"] == "1"
    assert "wall_time" not in rows[0]
    constants = json.load(open(tmp_path / "constants.json"))
    assert constants["status"] == "converged"
    assert load_mesh(tmp_path / "final_mesh.off").n_tri == int(rows[-1]["n_tri"])


def test_run_not_converged_exit_code(tmp_path):
    assert _run(tmp_path, "run", "--case", "Y1", "--max-iter", "2") == 2


def test_export_meshes(tmp_path):
    _run(tmp_path, "run", "--case", "Y1", "--max-iter", "3", "--export-meshes")
    assert sorted(p.name for p in tmp_path.glob("mesh_*.off")) == \
        ["mesh_000.off", "mesh_001.off", "mesh_002.off"]


def test_history_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        _run(tmp_path / name, "run", "--case", "gaussian-bump", "--max-iter", "6")
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()


def test_missing_case(tmp_path, capsys):
    assert _run(tmp_path, "run") == 1
    assert "case" in capsys.readouterr().err


def test_invalid_epsilon(tmp_path, capsys):
    assert _run(tmp_path, "run", "--case", "Y1", "--eps", "0") == 1
    assert "epsilon" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("case = Y1\nfoo = 3\n")
    assert _run(tmp_path, "run", "--config", str(cfg)) == 1
    assert "foo" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ncase = Y1\nmax_iter = 1  # inline\neps = 1e-9\n")
    assert _run(tmp_path, "run", "--config", str(cfg), "--max-iter", "3") == 2
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert len(rows) == 3


def test_study_with_too_few_iterations(tmp_path, capsys):
    assert _run(tmp_path, "study", "--case", "Y1", "--max-iter", "2") == 1
    assert "insufficient data" in capsys.readouterr().err
    assert (tmp_path / "rates.csv").exists()


def test_verify_subset(tmp_path, capsys):
    assert _run(tmp_path, "verify", "--checks", "pl1,pl2") == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines()[1:-1]]
    assert lines and all(ln.startswith(("pl1.", "pl2.")) for ln in lines)


def test_verify_detects_corrupted_mass(tmp_path, capsys):
    assert _run(tmp_path, "verify", "--checks", "complex", "--corrupt-mass") == 1
    assert "mass_spd" in capsys.readouterr().err


def test_verify_unknown_check(tmp_path):
    assert _run(tmp_path, "verify", "--checks", "nope") == 1


@pytest.mark.parametrize("preset, nv, nf", [("icosahedron", 12, 20), ("octahedron", 6, 8)])
def test_mesh_export(tmp_path, preset, nv, nf):
    out = tmp_path / "m.off"
    assert main(["mesh", "--preset", preset, "-o", str(out)]) == 0
    assert out.read_text().splitlines()[1].split()[:2] == [str(nv), str(nf)]


def test_mesh_refine_and_round_trip(tmp_path):
    first, second = tmp_path / "a.off", tmp_path / "b.off"
    assert main(["mesh", "--refine", "2", "-o", str(first)]) == 0
    assert load_mesh(first).n_tri == 320
    assert main(["mesh", "--input", str(first), "-o", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()


def test_bad_thread_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("HODGE_AFEM_THREADS", "zero")
    assert _run(tmp_path, "run", "--case", "Y1", "--eps", "0.5") == 1
