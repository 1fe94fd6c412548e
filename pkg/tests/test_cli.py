import json

import numpy as np
import pytest

from oracles import planted_kl_samples
from stochid.cli import bundled_config, parse_config, parse_config_dict, run_cli, serialize_config
from stochid.errors import InvalidArgument
from stochid.experiments import build_setup, make_example
from stochid.optimizer import RunConfig


def test_empty_config_gives_defaults():
    cfg, overrides = parse_config_dict({})
    assert cfg == RunConfig() and overrides == {}


@pytest.mark.parametrize("bad,key", [({"beta": -1}, "beta"), ({"betta": 1.0}, "betta"),
                                     ({"level": 0}, "level"), ({"pcg_tol": "x"}, "pcg_tol"),
                                     ({"density": "normal"}, "density")])
def test_invalid_config_names_the_key(bad, key):
    with pytest.raises(InvalidArgument, match=f"'{key}'"):
        parse_config_dict(bad)


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{beta: 1")
    with pytest.raises(InvalidArgument, match="malformed"):
        parse_config(p)


@pytest.mark.parametrize("example_id", [1, 2, 3])
def test_bundled_config_roundtrip(example_id):
    cfg, overrides = parse_config_dict(json.loads(bundled_config(example_id)))
    again = parse_config_dict(json.loads(serialize_config(cfg, overrides)))
    assert again == (cfg, overrides)


def test_check_command(capsys):
    assert run_cli(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 5


def test_missing_data_file_is_an_error(tmp_path, capsys):
    code = run_cli(["kl-analyze", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_missing_config_file_is_an_error(tmp_path):
    assert run_cli(["run-example", "--id", "1", "--config", str(tmp_path / "x.json")]) == 1


def test_kl_analyze_and_run_custom(tmp_path):
    spec = make_example(3)
    setup = build_setup(spec)
    # two planted modes on the Example-3 u-mesh
    U, _, _ = planted_kl_samples([1e-3, 2e-4], n_samples=200, n_per_side=2 * spec.q_mesh_size, seed=4)
    U = U - U.mean(axis=1, keepdims=True) + 0.05 * setup.space_u.interpolate(
        lambda X: np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1]))[:, None]
    data = tmp_path / "samples.csv"
    np.savetxt(data, U, delimiter=",")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"spatial_dim": 2, "q_mesh_size": spec.q_mesh_size, "level": 2,
                               "forcing": "2*pi**2*sin(pi*x1)*sin(pi*x2)", "max_outer": 3,
                               "preconditioner": "kron", "n_mc": 100}))
    out = tmp_path / "kl"
    assert run_cli(["kl-analyze", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    model = json.loads((out / "kl.json").read_text())
    assert model["rank"] == 2
    assert np.loadtxt(out / "y_samples.csv", delimiter=",").shape == (2, 200)
    out2 = tmp_path / "custom"
    code = run_cli(["run-custom", "--config", str(cfg), "--data", str(data), "--out", str(out2)])
    meta = json.loads((out2 / "run.json").read_text())
    assert code == (0 if meta["status"] == "converged" else 2)
    assert (out2 / "convergence.csv").exists()


def test_bad_forcing_expression(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"forcing": "exp(z)"}))
    data = tmp_path / "d.csv"
    np.savetxt(data, np.ones((61, 3)), delimiter=",")
    assert run_cli(["kl-analyze", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path)]) == 1


def test_run_example_exit_code_matches_status(tmp_path):
    code = run_cli(["run-example", "--id", "1", "--seed", "7", "--out", str(tmp_path)])
    meta = json.loads((tmp_path / "run.json").read_text())
    assert (tmp_path / "convergence.csv").exists()
    assert code == (0 if meta["status"] == "converged" else 2)
