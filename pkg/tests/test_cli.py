import csv
import json
from pathlib import Path

import pytest
import yaml

from mastrack import __version__
from mastrack import config as cfgmod
from mastrack.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_INFEASIBLE, EXIT_OK, main
from mastrack.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def short_config(tmp_path, name="example1.yaml", **overrides):
    raw = yaml.safe_load((CONFIGS / name).read_text())
    raw["simulation"]["horizon"] = overrides.pop("horizon", 10)
    for dotted, value in overrides.items():
        node = raw
        keys = dotted.split("__")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.yaml")):
        cfgmod.load(path)


def test_defaults_and_json_subset(tmp_path):
    raw = {"plant": {"A": [[-1]], "B": [[1]], "C": [[1]]},
           "topologies": {"graphs": [{"adjacency": [[0]], "leader_links": [1]}]},
           "schedule": {"w": 1, "delta": 0.5}}
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(raw))
    cfg = cfgmod.load(path)
    assert cfg["simulation"]["step"] == 1e-3
    assert cfg["leader_term_sign"] == 1 and cfg["neighbor_term_sign"] == 1


@pytest.mark.parametrize("patch,msg", [
    ({"plant": {"A": [[1, 0]], "B": [[1]], "C": [[1]]}}, "square"),
    ({"simulation": {"step": -0.1}}, "step"),
    ({"unknown_block": 1}, "unknown_block"),
    ({"schedule": {"w": 1, "delta": 0.5, "mode": "three-mode"}}, "h"),
])
def test_validation_errors(patch, msg):
    raw = {"plant": {"A": [[-1]], "B": [[1]], "C": [[1]]},
           "topologies": {"graphs": [{"adjacency": [[0]], "leader_links": [1]}]},
           "schedule": {"w": 1, "delta": 0.5}}
    raw.update(patch)
    with pytest.raises(ConfigError, match=msg):
        cfgmod.validate(raw)


def test_output_directory_precedence(monkeypatch, tmp_path):
    cfg = cfgmod.load(CONFIGS / "example1.yaml")
    monkeypatch.delenv(cfgmod.OUT_DIR_ENV, raising=False)
    assert cfgmod.output_directory(cfg) == Path("out/example1")
    monkeypatch.setenv(cfgmod.OUT_DIR_ENV, str(tmp_path / "env"))
    assert cfgmod.output_directory(cfg) == tmp_path / "env"
    assert cfgmod.output_directory(cfg, str(tmp_path / "flag")) == tmp_path / "flag"


def test_run_example(tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(short_config(tmp_path)), "--out", str(out), "--quiet"]) == EXIT_OK
    for k in range(1, 5):
        svg = (out / f"tracking_state{k}.svg").read_text()
        assert svg.startswith("<svg") and "</svg>" in svg
    for name in ("observer_error.svg", "lyapunov.svg", "timeline.svg", "trace.csv"):
        assert (out / name).exists()
    m = manifest(out)
    assert m["tool"]["version"] == __version__
    assert m["status"] == "ok"
    assert m["protocol"] == {"leader_term_sign": 1, "neighbor_term_sign": -1}
    assert m["gains"]["source"] == "best-effort"
    assert {"Q1", "Q2", "K", "G_obs", "P1", "P2"} <= set(m["gains"])
    assert m["config"]["synthesis"]["beta"] == 0.01
    assert len(m["topologies"]) == 3 and all(t["spanning_tree"] for t in m["topologies"])
    assert m["beta_bound"]["admissible"]
    assert "delta_threshold_max" in m["rates"]
    assert "final_tracking_error" in m["convergence"]


def test_run_config_flag_and_no_plots(tmp_path):
    out = tmp_path / "o"
    cfg = short_config(tmp_path, horizon=5)
    assert main(["run", "--config", str(cfg), "--out", str(out), "--no-plots", "--quiet"]) == EXIT_OK
    assert not list(out.glob("*.svg"))


def test_infeasible_exit_two(tmp_path):
    out = tmp_path / "inf"
    assert main(["run", str(CONFIGS / "infeasible.yaml"), "--out", str(out), "--quiet"]) == EXIT_INFEASIBLE
    m = manifest(out)
    assert m["infeasibility"]["block"] == "Q1"
    assert not (out / "trace.csv").exists()


def test_negative_step_exit_one(tmp_path, capsys):
    cfg = short_config(tmp_path, simulation__step=-0.001)
    assert main(["run", str(cfg), "--out", str(tmp_path / "neg")]) == EXIT_CONFIG
    assert "step" in capsys.readouterr().err
    assert not (tmp_path / "neg").exists()


def test_check_schedule_invariant(tmp_path, capsys):
    cfg = short_config(tmp_path, schedule__delta=5.5)
    assert main(["check", str(cfg), "--out", str(tmp_path / "c")]) == EXIT_CONFIG
    assert "delta < w" in capsys.readouterr().err


def test_check_ok(tmp_path):
    out = tmp_path / "c"
    assert main(["check", str(short_config(tmp_path)), "--out", str(out), "--quiet"]) == EXIT_OK
    assert manifest(out)["check"]["status"] == "ok"


def test_check_off_grid(tmp_path):
    cfg = short_config(tmp_path, schedule__delta=3.5004)
    assert main(["check", str(cfg), "--out", str(tmp_path / "c"), "--quiet"]) == EXIT_CONFIG


def test_check_no_spanning_tree(tmp_path):
    cfg = short_config(tmp_path)
    raw = yaml.safe_load(cfg.read_text())
    raw["topologies"]["graphs"][0]["leader_links"] = [0, 0, 0, 0]
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "c"
    assert main(["check", str(cfg), "--out", str(out), "--quiet"]) == EXIT_CONFIG
    assert manifest(out)["topologies"][0]["spanning_tree"] is False


def test_synthesize_with_fixture(tmp_path, capsys):
    cfg = short_config(tmp_path, "certified.yaml")
    raw = yaml.safe_load(cfg.read_text())
    raw["synthesis"]["fixture"] = {"P1": [[1, 0], [0, 1]], "P2": [[1, 0], [0, 1]], "G_obs": [[0], [0]]}
    raw["plant"] = {"A": [[-1, 0], [0, -1]], "B": [[0], [0]], "C": [[1, 0]]}
    raw["topologies"] = {"graphs": [{"adjacency": [[0]], "leader_links": [1]}]}
    del raw["simulation"]["leader"]
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "s"
    assert main(["synthesize", str(cfg), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "Q1 lambda_max" in text and "Q2 lambda_max" in text
    m = manifest(out)
    assert m["gains"]["source"] == "fixture"
    assert m["gains"]["Q1"]["feasible"] is True


def test_simulate_printed_gains(tmp_path):
    out = tmp_path / "p"
    cfg = short_config(tmp_path, "printed_gains.yaml", horizon=5)
    assert main(["simulate", str(cfg), "--out", str(out), "--quiet", "--no-plots"]) == EXIT_OK
    m = manifest(out)
    assert m["gains"]["source"] == "fixture"
    assert (out / "trace.csv").exists()


def test_simulate_requires_fixture(tmp_path):
    assert main(["simulate", str(short_config(tmp_path)), "--out", str(tmp_path / "x"), "--quiet"]) == EXIT_CONFIG


def test_divergence_exit_three(tmp_path):
    raw = {"plant": {"A": [[5.0]], "B": [[1.0]], "C": [[1.0]]},
           "topologies": {"graphs": [{"adjacency": [[0]], "leader_links": [1]}]},
           "schedule": {"w": 1, "delta": 0.5},
           "synthesis": {"fixture": {"K": [[0.0]], "G_obs": [[0.0]]}},
           "simulation": {"step": 0.01, "horizon": 10, "followers": [[1.0]]}}
    cfg = tmp_path / "div.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    out = tmp_path / "d"
    assert main(["simulate", str(cfg), "--out", str(out), "--quiet"]) == EXIT_DIVERGED
    assert (out / "trace.csv").exists()
    assert "diverged" in manifest(out)["status"]


def test_sweep_csv(tmp_path):
    cfg = short_config(tmp_path, "certified.yaml", sweep={"deltas": [1.0, 3.5], "horizon": 10, "workers": 1})
    out = tmp_path / "sw"
    assert main(["sweep", str(cfg), "--out", str(out), "--quiet"]) == EXIT_OK
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [float(r["delta"]) for r in rows] == [1.0, 3.5]
    assert {"converged", "time_to_tolerance", "threshold_max", "above_threshold"} <= set(rows[0])


def test_seed_changes_initial_state(tmp_path):
    cfg = short_config(tmp_path, horizon=1)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--out", str(a), "--seed", "1", "--quiet", "--no-plots"]) == EXIT_OK
    assert main(["run", str(cfg), "--out", str(b), "--seed", "2", "--quiet", "--no-plots"]) == EXIT_OK
    assert (a / "trace.csv").read_bytes() != (b / "trace.csv").read_bytes()
    assert manifest(a)["seed"] == 1


def test_missing_config(tmp_path):
    assert main(["run", str(tmp_path / "nope.yaml"), "--quiet"]) == EXIT_CONFIG
