import json
import os

import numpy as np
import pytest
import yaml

from smspde.cli import COMMANDS, run
from smspde.config import ConfigError, RunConfig, build_setup, load_config

SMALL = {
    "grid": {"resolution": 21},
    "model": {"theta": 0.15},
    "time": {"M": 20},
    "oracle": {"count": 8},
    "solver": {"max_iter": 60},
}


def write_cfg(tmp_path, data, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_default_config_round_trip():
    cfg = RunConfig.from_dict({})
    again = RunConfig.from_dict(yaml.safe_load(cfg.canonical_yaml()))
    assert again.to_dict() == cfg.to_dict()
    assert again.canonical_yaml() == cfg.canonical_yaml()


def test_shipped_default_matches_code():
    here = os.path.dirname(__file__)
    cfg = load_config(os.path.join(here, "..", "configs", "default.yaml"))
    assert cfg.to_dict() == RunConfig.from_dict({}).to_dict()


@pytest.mark.parametrize(
    "data, needle",
    [
        ({"grid": {"resolution": 2}}, "resolution"),
        ({"grid": {"extents": [[1.0, 1.0]]}}, "degenerate"),
        ({"model": {"theta": 0.0}}, "theta"),
        ({"model": {"alpha": float("nan")}}, "alpha"),
        ({"model": {"preset": "harvest-exp"}}, "preset"),
        ({"solver": {"omega": 1.5}}, "omega"),
        ({"noise": {"paths": 0}}, "paths"),
        ({"noise": {"mark_law": "cauchy"}}, "mark_law"),
        ({"extra": {}}, "unknown"),
        ({"model": {"gamma": 1}}, "unknown"),
        ({"model": {"diffusion": [[1.0, 2.0], [2.0, 1.0]]}, "grid": {"extents": [[0, 1], [0, 1]], "resolution": 11}}, "indefinite"),
    ],
)
def test_invalid_configs(data, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.from_dict(data)


def test_bad_resolution_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, {"grid": {"resolution": 2}})
    assert run(["simulate", "-c", path, "-o", str(tmp_path / "o")]) == 1
    assert "resolution" in capsys.readouterr().err


def test_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("grid: [unclosed\n")
    assert run(["simulate", "-c", str(path), "-o", str(tmp_path / "o")]) == 1
    assert run(["simulate", "-c", str(tmp_path / "missing.yaml")]) == 1


def test_numerical_failure_writes_diagnostic(tmp_path):
    data = {"model": {"preset": "custom-linear", "custom": {"drift": {"yb": 1e300}}, "u_min": 0.0}, "time": {"M": 10}}
    path = write_cfg(tmp_path, data)
    out = tmp_path / "o"
    with np.errstate(all="ignore"):
        assert run(["simulate", "-c", path, "-o", str(out)]) == 2
    diag = json.loads((out / "diagnostic.json").read_text())
    assert diag["command"] == "simulate" and "step" in diag["info"]


def test_validate_default_passes(tmp_path, capsys):
    assert run(["validate", "-o", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert rep["passed"] and len(rep["invariants"]) >= 10
    text = capsys.readouterr().out
    assert all(r["invariant"] in text for r in rep["invariants"])


def test_validate_failure_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, dict(SMALL, model={"theta": 0.15, "reaction": 1000.0}))
    assert run(["validate", "-c", path, "-o", str(tmp_path / "o")]) == 3
    assert "operators" in capsys.readouterr().err


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SMSPDE_OUTPUT_DIR", str(tmp_path / "env"))
    path = write_cfg(tmp_path, SMALL)
    assert run(["simulate", "-c", path]) == 0
    assert (tmp_path / "env" / "forward.csv").exists()


def test_csv_schemas(tmp_path):
    path = write_cfg(tmp_path, dict(SMALL, noise={"paths": 3, "intensity": 0.5}, model={"theta": 0.15, "beta": 0.2}))
    heads = {
        "simulate": ("forward.csv", "path,t,x,Y"),
        "adjoint": ("adjoint.csv", "path,t,x,p,q,c_r"),
        "picard": ("picard.csv", "n,dp,dq,dr,ratio"),
        "optimize": ("control.csv", "t,x,u"),
        "oracle": ("oracle.csv", "value,J"),
    }
    for cmd, (name, head) in heads.items():
        out = tmp_path / cmd
        assert run([cmd, "-c", path, "-o", str(out)]) == 0
        assert (out / name).read_text().splitlines()[0] == head
        man = json.loads((out / "manifest.json").read_text())
        assert name in man["files"] and "config.yaml" in man["files"]
        assert man["seed"] == 0 and man["command"] == cmd
    rows = (tmp_path / "simulate" / "forward.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 21 * 21


def test_2d_run(tmp_path):
    data = {"grid": {"extents": [[0, 1], [0, 1]], "resolution": 9}, "model": {"theta": 0.3}, "time": {"M": 5}}
    path = write_cfg(tmp_path, data)
    assert run(["simulate", "-c", path, "-o", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "forward.csv").read_text().startswith("path,t,x,y,Y\n")


def test_each_command_reproducible(tmp_path):
    path = write_cfg(tmp_path, dict(SMALL, noise={"paths": 50, "intensity": 0.5}, model={"theta": 0.15, "beta": 0.2}))
    for cmd in COMMANDS:
        a, b = tmp_path / f"{cmd}1", tmp_path / f"{cmd}2"
        ca = run([cmd, "-c", path, "-o", str(a)])
        cb = run([cmd, "-c", path, "-o", str(b)])
        assert ca == cb
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), (cmd, n)


def test_config_echo_reparses(tmp_path):
    path = write_cfg(tmp_path, SMALL)
    run(["simulate", "-c", path, "-o", str(tmp_path / "o")])
    echo = load_config(str(tmp_path / "o" / "config.yaml"))
    assert echo.to_dict() == load_config(path).to_dict()
    assert build_setup(echo).grid.size == 21


def test_defaults_command(capsys):
    assert run(["defaults"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["grid"]["resolution"] == 51
