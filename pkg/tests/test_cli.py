import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bmotaylor.cli import load_schema, main, run, validate_config
from bmotaylor.exceptions import ConfigurationError
from bmotaylor.grid import Grid, TensorField, write_gf1
from bmotaylor.report import content_hash, csv_text, dumps

REPO = Path(__file__).resolve().parents[1]


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def cli(*args):
    return main([str(a) for a in args])


# report emitter -----------------------------------------------------------------

def test_dumps_floats_and_specials():
    text = dumps({"a": 0.1, "b": np.float64(1.0), "c": float("nan"), "d": np.int64(3),
                  "e": [1e-300, float("inf")], "f": np.bool_(True), "g": (1, 2)})
    data = json.loads(text)
    assert data == {"a": 0.1, "b": 1.0, "c": None, "d": 3, "e": [1e-300, None], "f": True, "g": [1, 2]}
    assert '"a": 0.10000000000000001' in text


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip(x):
    assert json.loads(dumps({"x": x}))["x"] == x


def test_content_hash_tracks_files(tmp_path):
    f = tmp_path / "a.gf1"
    f.write_text("1")
    h1 = content_hash({"k": 1}, [f])
    assert h1 == content_hash({"k": 1}, [f])
    f.write_text("2")
    assert content_hash({"k": 1}, [f]) != h1
    assert content_hash({"k": 2}, [f]) != content_hash({"k": 1}, [f])


def test_csv_text():
    text = csv_text([{"a": 1.5, "b": True, "c": None}, {"a": float("nan"), "b": False, "c": "x"}])
    assert text.splitlines() == ["a,b,c", "1.5,true,", ",false,x"]


# schema -------------------------------------------------------------------------

def test_schema_copy_in_docs_matches_package():
    docs = json.loads((REPO / "docs" / "config.schema.json").read_text())
    assert docs == load_schema()


@pytest.mark.parametrize("cfg,field", [
    ({"command": "nope"}, "command"),
    ({"command": "bmo-norm", "field": {"kind": "random"}, "seed": -1}, "seed"),
    ({"command": "taylor-check", "integrand": {"family": "double_well"}, "F": {"kind": "zero"},
      "G": {"kind": "zero"}, "M": -1, "J2": 1.0}, "M"),
    ({"command": "stress-test", "grid": {"shape": [4]}, "integrand": {"family": "quadratic"},
      "bc": {"kind": "dirichlet"}, "delta": 1.0, "generators": ["spiral"]}, "generators/0"),
])
def test_schema_errors_name_the_field(cfg, field):
    with pytest.raises(ConfigurationError, match=f"config field {field}"):
        validate_config(cfg)


# commands -------------------------------------------------------------------------

def test_bmo_norm_constant_gf1(tmp_path, capsys):
    write_gf1(tmp_path / "c.gf1", TensorField.constant(Grid.unit((6, 6)), [[3.0, 4.0]]))
    p = write_config(tmp_path, {"command": "bmo-norm", "field": {"path": "c.gf1"}, "output": "r.json"})
    assert cli("--config", p, "--no-timestamp") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["seminorm"] == 0.0 and rep["bmo_norm"] == 5.0
    assert "timestamp" not in rep
    assert (tmp_path / "r.csv").read_text().startswith("id,seminorm")


def test_taylor_check_equal_fields(tmp_path):
    cfg = {"command": "taylor-check", "grid": {"shape": [6, 6]}, "integrand": {"family": "double_well"},
           "F": {"kind": "random", "rows": 2}, "G": {"kind": "random", "rows": 2}, "M": 1.0, "J2": 1.0,
           "output": "t.json"}
    p = write_config(tmp_path, cfg)
    assert cli("--config", p, "--no-timestamp", "--csv") == 0
    rep = json.loads((tmp_path / "t.json").read_text())
    assert rep["identity_gap"] == 0.0 and rep["inequality_margin"] == 0.0
    for key in ("C1", "C2", "c_r", "J2", "M"):
        assert key in rep
    assert "key,value" in (tmp_path / "t.csv").read_text()


def test_taylor_check_ball_violation_is_config_error(tmp_path, capsys):
    cfg = {"command": "taylor-check", "grid": {"shape": [6, 6]}, "integrand": {"family": "double_well"},
           "F": {"kind": "zero", "rows": 2}, "G": {"kind": "random", "rows": 2, "scale": 10},
           "M": 0.5, "J2": 1.0}
    assert cli("--config", write_config(tmp_path, cfg)) == 1
    assert "config field M" in capsys.readouterr().err


def test_interp_calibrate_reports_constants(tmp_path):
    cfg = {"command": "interp-calibrate", "grid": {"shape": [8, 8]}, "p": 2, "q": 3, "output": "i.json"}
    assert cli("--config", write_config(tmp_path, cfg), "--no-timestamp", "--workers", "2") == 0
    rep = json.loads((tmp_path / "i.json").read_text())
    assert rep["J2"] == max(r["ratio"] for r in rep["fields"])
    assert rep["J1"] >= 1.0


def test_el_solve_affine(tmp_path):
    cfg = {"command": "el-solve", "grid": {"shape": [8, 8]}, "integrand": {"family": "quadratic"},
           "bc": {"kind": "dirichlet", "data": {"A": [[1.0, 2.0]]}}, "init": {"noise": 0.1}, "output": "e.json"}
    assert cli("--config", write_config(tmp_path, cfg), "--no-timestamp") == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert rep["converged"] and rep["el_residual_norm"] < 1e-10
    assert math.isclose(rep["coercivity_4a"], 1.0, abs_tol=1e-8) and math.isclose(rep["a"], 0.25, abs_tol=1e-8)


def test_stress_nonconvex_exit_two(tmp_path):
    cfg = {"command": "stress-test", "grid": {"shape": [32]}, "integrand": {"family": "double_well"},
           "bc": {"kind": "dirichlet", "data": {"A": [[0.6]]}}, "delta": 2.0, "n_samples": 40,
           "output": "s.json"}
    assert cli("--config", write_config(tmp_path, cfg), "--no-timestamp") == 2
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["failures"] > 0 and rep["certified_delta"] < 2.0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) == 41


def test_stress_quadratic_with_q_variant(tmp_path):
    cfg = {"command": "stress-test", "grid": {"shape": [8, 8]}, "integrand": {"family": "quadratic"},
           "bc": {"kind": "mixed", "faces": ["x-"], "data": {"A": [[0.5, 0.0]]}}, "delta": "sweep",
           "n_samples": 8, "q_variant": {"q": 3}, "output": "s.json"}
    assert cli("--config", write_config(tmp_path, cfg), "--no-timestamp") == 0
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["q_variant"]["failures"] == 0
    assert rep["certified_delta"] == rep["delta"]


def test_missing_file_and_bad_json(tmp_path, capsys):
    p = write_config(tmp_path, {"command": "bmo-norm", "field": {"path": "missing.gf1"}})
    assert cli("--config", p) == 1
    assert "missing.gf1" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli("--config", bad) == 1
    assert cli("--config", tmp_path / "absent.json") == 1


def test_command_mismatch(tmp_path):
    p = write_config(tmp_path, {"command": "bmo-norm", "field": {"kind": "zero"}, "grid": {"shape": [4]}})
    assert cli("el-solve", "--config", p) == 1


def test_unknown_integrand_family(tmp_path, capsys):
    cfg = {"command": "el-solve", "grid": {"shape": [4]}, "integrand": {"family": "cubic"},
           "bc": {"kind": "neumann"}}
    assert cli("--config", write_config(tmp_path, cfg)) == 1
    assert "known families" in capsys.readouterr().err


def test_seed_override_changes_output(tmp_path):
    cfg = {"command": "bmo-norm", "grid": {"shape": [8, 8]}, "field": {"kind": "random"}, "output": "r.json"}
    p = write_config(tmp_path, cfg)
    cli("--config", p, "--no-timestamp", "--seed", "1")
    a = (tmp_path / "r.json").read_text()
    cli("--config", p, "--no-timestamp", "--seed", "2")
    assert (tmp_path / "r.json").read_text() != a


def test_timestamp_present_by_default(tmp_path):
    cfg = {"command": "bmo-norm", "grid": {"shape": [4]}, "field": {"kind": "random"}, "output": "r.json"}
    cli("--config", write_config(tmp_path, cfg))
    assert "timestamp" in json.loads((tmp_path / "r.json").read_text())


@pytest.mark.parametrize("name", sorted(p.name for p in (REPO / "configs").glob("*.json")))
def test_shipped_configs_deterministic(tmp_path, name):
    cfg = json.loads((REPO / "configs" / name).read_text())
    cfg["output"] = "out.json"
    p = write_config(tmp_path, cfg)
    codes, outputs = [], []
    for workers in (1, 3):
        codes.append(cli("--config", p, "--no-timestamp", "--workers", workers))
        outputs.append((tmp_path / "out.json").read_bytes())
    assert codes[0] == codes[1] and outputs[0] == outputs[1]
    assert codes[0] == (2 if "nonconvex" in name else 0)


def test_module_entry_point(tmp_path):
    cfg = {"command": "bmo-norm", "grid": {"shape": [4]}, "field": {"kind": "zero"}, "output": "r.json"}
    p = write_config(tmp_path, cfg)
    res = subprocess.run([sys.executable, "-m", "bmotaylor", "--config", str(p), "--no-timestamp"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert run(cfg, tmp_path, timestamp=False)[0] == 0
