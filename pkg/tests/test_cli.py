import csv
import json

import pytest

from cutflow.cli import calibration_closed_form, main
from cutflow.config import ConfigError, parse_config


def _write(tmp_path, doc, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_minimal_config_fills_defaults():
    cfg = parse_config('{"env": {"d1": 5, "d2": 1, "variant": "zero"}}')
    assert cfg.env.kappa == 0.1 and cfg.env.range_R == 0.5
    assert cfg.sim.dt == 0.01 and cfg.cut.window_past == 50 and cfg.replicas == 1
    assert cfg.bridge.n_bridges == 32


@pytest.mark.parametrize("doc, path", [
    ({"env": {"d1": 5, "d2": 1, "kappa": -1}}, "env.kappa"),
    ({"env": {"d1": 5}}, "env.d2"),
    ({"env": {"d1": "5", "d2": 1}}, "env.d1"),
    ({"env": {"d1": 5, "d2": 1, "variant": "constant(0.5)"}}, "env.variant"),
    ({"env": {"d1": 5, "d2": 1}, "sim": {"dt": 0.03}}, "sim.dt"),
    ({"env": {"d1": 5, "d2": 1}, "replicas": 0}, "replicas"),
    ({"env": {"d1": 5, "d2": 1, "intensity": 1.0, "cell_mean": 2.0}}, "env.cell_mean"),
])
def test_errors_are_path_qualified(doc, path):
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps(doc))
    assert exc.value.path == path
    assert str(exc.value).startswith(path)


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError) as exc:
        parse_config('{"env": {"d1": 5, "d2": 1, "kapa": 0.1}}')
    assert exc.value.path == "env.kapa"
    assert "env.kappa" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        parse_config('{"env": {"d1": 5, "d2": 1}, "optons": {}}')
    assert "options" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_simulate_csv(tmp_path):
    cfg = _write(tmp_path, {"env": {"d1": 5, "d2": 1, "variant": "zero"}, "sim": {"horizon_T": 2.0}})
    out = tmp_path / "out"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "trajectory.csv")))
    assert rows[0] == ["t", "x1_0", "x1_1", "x1_2", "x1_3", "x1_4", "x2_0"]
    assert len(rows) - 1 == 2.0 / 0.01 + 1
    rep = _report(out)
    assert rep["config"]["env"]["variant"] == "zero"
    assert rep["seeds"] == {"master_seed": 0, "path_seed": 0, "bridge_seed": 0}


def test_calibrate_eps_and_determinism(tmp_path, capsys):
    cfg = _write(tmp_path, {"env": {"d1": 5, "d2": 1, "variant": "zero"}})
    assert calibration_closed_form(1) == pytest.approx(0.241971, abs=1e-6)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["calibrate-eps", "--config", cfg, "--out", str(a), "--assert"]) == 0
    assert main(["calibrate-eps", "--config", cfg, "--out", str(b)]) == 0
    rep = _report(a)
    assert rep["results"]["epsilon_raw"] == pytest.approx(0.241971, abs=1e-6)
    assert rep["passed"]

    def strip(p):
        return [line for line in (p / "report.json").read_text().splitlines() if '"timestamp"' not in line]
    assert strip(a) == strip(b)
    assert "PASS matches_closed_form" in capsys.readouterr().out


def test_seed_override(tmp_path, monkeypatch):
    cfg = _write(tmp_path, {"env": {"d1": 5, "d2": 1, "variant": "zero"}})
    monkeypatch.setenv("CUTFLOW_SEED", "1234")
    assert main(["calibrate-eps", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rep = _report(tmp_path / "o")
    assert rep["seeds"]["master_seed"] == 1234 == rep["config"]["env"]["master_seed"]
    monkeypatch.setenv("CUTFLOW_SEED", "abc")
    assert main(["calibrate-eps", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_exit_codes(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["bogus", "--config", "x.json"]) == 1
    bad = _write(tmp_path, {"env": {"d1": 5, "d2": 1, "kapa": 1}})
    assert main(["simulate", "--config", bad]) == 1
    # 20 replicas cannot pin the covariance to 5%: the check fails
    cfg = _write(tmp_path, {"env": {"d1": 5, "d2": 1}, "replicas": 20, "options": {"n_list": [1000]}})
    out = str(tmp_path / "m")
    assert main(["mclt", "--config", cfg, "--out", out]) == 0
    assert main(["mclt", "--config", cfg, "--out", out, "--assert"]) == 2
    assert not _report(tmp_path / "m")["checks"]["endpoint_cov_within_5pct"]
    eps_missing = _write(tmp_path, {"env": {"d1": 5, "d2": 1}, "sim": {"horizon_T": 120}})
    assert main(["cuts", "--config", eps_missing, "--out", out]) == 1


def test_density_experiment(tmp_path):
    cfg = _write(tmp_path, {"env": {"d1": 2, "d2": 1, "kappa": 0.2, "variant": "constant(0.1)"},
                            "options": {"density_points": 5}})
    assert main(["density", "--config", cfg, "--out", str(tmp_path / "d"), "--assert"]) == 0
    rows = list(csv.reader(open(tmp_path / "d" / "density.csv")))
    assert rows[0] == ["y_prime_0", "estimate", "std_error"] and len(rows) == 6


def test_cuts_with_plots(tmp_path):
    cfg = _write(tmp_path, {"env": {"d1": 7, "d2": 1}, "sim": {"horizon_T": 200}, "replicas": 20,
                            "cut": {"window_past": 20, "window_future": 20}, "options": {"eps": 0.3}})
    out = tmp_path / "c"
    assert main(["cuts", "--config", cfg, "--out", str(out), "--emit-plots", "--threads", "1"]) == 0
    rep = _report(out)
    assert "tail_survival.svg" in rep["artifacts"] and (out / "tail_survival.svg").exists()
    assert rep["results"]["statistics"]["p0_hat"] > 0
    assert list(csv.reader(open(out / "cuts.csv")))[0] == ["replica", "n", "separation", "truncated"]


def test_velocity_clt_quenched_decouple_small(tmp_path):
    base = {"env": {"d1": 5, "d2": 1, "variant": "zero"}, "sim": {"horizon_T": 100}}
    cfg = _write(tmp_path, dict(base, replicas=300))
    assert main(["velocity", "--config", cfg, "--out", str(tmp_path / "v"), "--assert"]) == 0
    assert main(["clt", "--config", cfg, "--out", str(tmp_path / "k"), "--emit-plots"]) == 0
    assert (tmp_path / "k" / "covariance.svg").exists()
    q = _write(tmp_path, dict(base, options={"n_envs": 5, "paths_per_env": 8, "scan_T": 0.125, "dyadic_m": [3, 5]}),
               "q.json")
    assert main(["quenched-scan", "--config", q, "--out", str(tmp_path / "q"), "--emit-plots"]) == 0
    assert len(_report(tmp_path / "q")["results"]["scan"]["rows"]) == 3
    dec = _write(tmp_path, dict(base, replicas=3, sim={"horizon_T": 200}, cut={"window_past": 20, "window_future": 20},
                                options={"eps": 0.3, "min_blocks": 20}), "dec.json")
    assert main(["decouple", "--config", dec, "--out", str(tmp_path / "dc")]) == 0
    rep = _report(tmp_path / "dc")
    assert rep["results"]["n_direct"] >= 20
