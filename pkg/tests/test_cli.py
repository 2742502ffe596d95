import csv
import json

import numpy as np
import pytest
import yaml

from policy_cegis.cli import main
from policy_cegis.config import Built, ConfigError, load_config, parse_config, preset_names

INTEGRATOR = {
    "name": "integ",
    "plant": {"kind": "integrator"},
    "basis": {"kind": "custom", "terms": ["x[0]"], "degree": 1},
    "mpc": {"horizon": 5, "dt": 0.2, "running_weights": [1.0, 2.0], "terminal_weights": [5.0],
            "lam": 0.5},
    "falsifier": {"random_budget": 2000, "adversarial_budget": 50, "dt": 0.2, "max_steps": 40,
                  "random_block": 500, "adversarial_block": 25},
    "learner": {"delta": 10.0, "demo_check_samples": 5},
    "seeds": {"run": 2},
    "baseline": {"M": [3, 6], "mode": "uniform", "max_steps": 50},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "integ.yaml"
    p.write_text(yaml.safe_dump(INTEGRATOR))
    return p


def with_(path, **changes):
    d = json.loads(json.dumps(INTEGRATOR))
    for dotted, v in changes.items():
        sec, key = dotted.split("__")
        d[sec][key] = v
    path.write_text(yaml.safe_dump(d))
    return path


def test_presets_bundled():
    names = preset_names()
    for l in range(1, 5):
        for k in ("linear", "affine"):
            assert f"car{l}_{k}" in names
    assert {"ductedfan_trig", "ductedfan_poly_fail"} <= set(names)
    for n in names:
        Built(load_config(n))


@pytest.mark.parametrize("change,field", [({"mpc__lam": 0.0}, "mpc.lam"),
                                          ({"mpc__lam": 1.5}, "mpc.lam"),
                                          ({"mpc__horizon": 0}, "mpc.horizon"),
                                          ({"learner__delta": -1}, "learner.delta")])
def test_validation_field_errors(tmp_path, change, field, capsys):
    p = with_(tmp_path / "bad.yaml", **change)
    with pytest.raises(ConfigError) as e:
        load_config(p)
    assert field in [f for f, _ in e.value.errors]
    assert main(["learn", str(p)]) == 1
    assert field in capsys.readouterr().err


def test_weight_length_checked(tmp_path):
    p = with_(tmp_path / "bad.yaml", mpc__running_weights=[1.0, 2.0, 3.0])
    with pytest.raises(ConfigError, match="running_weights"):
        Built(load_config(p))


def test_unknown_key_rejected():
    d = dict(INTEGRATOR, extra_section={})
    with pytest.raises(ConfigError, match="extra_section"):
        parse_config(d)


def test_missing_file_exit_1(tmp_path):
    assert main(["learn", str(tmp_path / "nope.yaml")]) == 1
    assert main(["export", str(tmp_path)]) == 1


def test_learn_export_roundtrip(cfg_file, tmp_path, capsys):
    rd = tmp_path / "run"
    assert main(["learn", str(cfg_file), "--run-dir", str(rd)]) == 0
    snap = json.loads((rd / "config.json").read_text())
    assert snap["seed"] == 2 and snap["mpc"]["lam"] == 0.5
    iterations = sum(1 for _ in open(rd / "iterations.jsonl"))
    assert main(["export", str(rd)]) == 0
    rows = list(csv.reader(open(rd / "export" / "iterations.csv")))
    assert len(rows) - 1 == iterations
    trace = list(csv.reader(open(rd / "export" / "trace.csv")))
    assert trace[0] == ["trace", "t", "x0", "u0"]
    # re-running from the snapshot reproduces the policy
    rd2 = tmp_path / "run2"
    assert main(["learn", str(rd / "config.json"), "--run-dir", str(rd2)]) == 0
    a = json.loads((rd / "policy.json").read_text())["theta"]
    b = json.loads((rd2 / "policy.json").read_text())["theta"]
    assert a == b


def test_falsify_zero_policy(cfg_file, tmp_path):
    rd = tmp_path / "run"
    main(["learn", str(cfg_file), "--run-dir", str(rd)])
    assert main(["falsify", str(rd / "policy.json"), str(cfg_file)]) == 0
    d = json.loads((rd / "policy.json").read_text())
    d["theta"] = [0.0] * len(d["theta"])
    (tmp_path / "zero.json").write_text(json.dumps(d))
    assert main(["falsify", str(tmp_path / "zero.json"), str(cfg_file),
                 "--out", str(tmp_path / "cex")]) == 2
    assert (tmp_path / "cex.csv").exists()


def test_demo_check(cfg_file, capsys):
    assert main(["demo-check", str(cfg_file), "--samples", "6"]) == 0
    assert "0 decrease violations / 6 samples" in capsys.readouterr().out


def test_baseline_cli(cfg_file, tmp_path):
    out = tmp_path / "bl"
    assert main(["baseline", str(cfg_file), "--out", str(out)]) == 0
    rep = json.loads((out / "baseline_report.json").read_text())
    assert [r["M"] for r in rep["regression"]] == [3, 6]
    assert (out / "dataset_M3_uniform.jsonl").exists()


def test_env_run_root(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("POLICY_CEGIS_RUN_ROOT", str(tmp_path / "root"))
    assert main(["learn", str(cfg_file)]) == 0
    dirs = list((tmp_path / "root").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("integ_") and dirs[0].name.endswith("_s2")


def test_env_workers(cfg_file, monkeypatch):
    monkeypatch.setenv("POLICY_CEGIS_WORKERS", "3")
    assert Built(load_config(cfg_file)).falsifier().workers == 3


def test_auto_time_budget(tmp_path):
    p = with_(tmp_path / "auto.yaml", falsifier__max_steps=None)
    b = Built(load_config(p))
    steps = b.falsifier().max_steps
    note = b.time_budget_note
    assert note["reached"] == note["samples"] == 100
    assert steps == int(np.ceil(3 * note["median_time_to_goal"] / 0.2 - 1e-9))


def test_snapshot_with_time_budget_reloads(tmp_path):
    p = with_(tmp_path / "auto.yaml", falsifier__max_steps=None)
    rd = tmp_path / "run"
    assert main(["learn", str(p), "--run-dir", str(rd)]) == 0
    snap = json.loads((rd / "config.json").read_text())
    assert "time_budget" in snap and snap["falsifier"]["max_steps"] is not None
    cfg = load_config(rd / "config.json")
    assert cfg.falsifier.max_steps == snap["falsifier"]["max_steps"]
