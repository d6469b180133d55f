import json
import subprocess
import sys

import pytest

from couette_lab.cli_io import (
    ConfigError, main, parse_config, read_series_csv, serialize,
)

TINY = {"mu": 0.1, "mach": 0.03, "alpha": 3.7, "nx": 4, "ny": 64, "ly": 64.0, "t_final": 1.0,
        "sample_every": 0.1, "checks": {"wrap": False}, "initial": {"width": 2.0}}


def write_cfg(tmp_path, **over):
    d = json.loads(json.dumps(TINY))
    d.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


# ---------------------------------------------------------------- configuration


def test_minimal_config_gets_defaults():
    cfg = parse_config(json.dumps({k: TINY[k] for k in ("mu", "mach", "alpha", "nx", "ny", "ly",
                                                        "t_final")}))
    assert cfg.lam == 0.1
    assert cfg.gamma_law == 2.0
    assert cfg.dealias == pytest.approx(2 / 3)
    assert cfg.solver.acoustic_gate is True
    assert cfg.n_samples() == 101


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps({**TINY, "mahc": 0.5}))
    assert exc.value.path == "mahc"
    with pytest.raises(ConfigError) as exc:
        parse_config(json.dumps({**TINY, "solver": {"dt_targt": 0.1}}))
    assert exc.value.path == "solver.dt_targt"


@pytest.mark.parametrize("key,value", [("mu", -1.0), ("nx", 4.5), ("observers", "all"),
                                       ("sample_spacing", "cubic"), ("checks", {"wrap": 1})])
def test_bad_values_are_refused(key, value):
    with pytest.raises(ConfigError):
        parse_config(json.dumps({**TINY, key: value}))


def test_missing_required_key():
    d = dict(TINY)
    d.pop("ly")
    with pytest.raises(ConfigError, match="ly"):
        parse_config(json.dumps(d))


def test_round_trip_is_canonical():
    cfg = parse_config(json.dumps({**TINY, "lambda": 0.2}))
    text = serialize(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize(again) == text
    assert again.config_hash() == cfg.config_hash()
    assert json.loads(text)["lambda"] == 0.2


# ---------------------------------------------------------------- commands


def test_missing_config_exits_1(capsys):
    assert main(["simulate"]) == 1
    assert last_error(capsys)["error"] == "config"


def test_nonexistent_config_exits_1(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 1


def test_unknown_key_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, mahc=0.5)
    assert main(["simulate", "--config", str(path)]) == 1
    assert last_error(capsys)["key"] == "mahc"


def test_acoustic_gate_refuses_before_stepping(tmp_path, capsys):
    path = write_cfg(tmp_path, dt=5.0)
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(path), "--out", str(out)]) == 1
    assert "acoustic" in last_error(capsys)["message"]
    assert not (out / "series.csv").exists()


def test_mach_bound_is_enforced(tmp_path, capsys):
    path = write_cfg(tmp_path, mach=0.5)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert last_error(capsys)["error"] == "validation"


def test_simulate_then_fit(tmp_path, capsys):
    path = write_cfg(tmp_path)
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(path), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["status"] == "completed"
    head = (out / "series.csv").read_text().splitlines()
    assert any(h.startswith("# config_hash: ") for h in head)
    assert any(h.startswith("# code_version: ") for h in head)
    ns = read_series_csv(out / "series.csv")
    assert ns.times[0] == 0 and ns.times[-1] == pytest.approx(1.0) and len(ns.times) == 11
    run = json.loads((out / "run.json").read_text())
    assert list(run)[0] == "meta"
    assert run["config"]["mu"] == 0.1
    assert main(["fit", "--series", str(out / "series.csv"), "--name", "L2_phi",
                 "--model", "exp"]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert fit["fit"]["model"] == "exponential"
    assert main(["fit", "--series", str(out / "series.csv"), "--name", "nope"]) == 1


def test_symbols_small_lattice(tmp_path, capsys):
    code = main(["symbols", "--mu", "0.01", "--k-max", "4", "--eta-max", "20", "--deta", "0.5",
                 "--t-max", "30", "--dt", "0.5", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0 and out.strip().endswith("PASS")
    assert json.loads((tmp_path / "symbols.json").read_text())["verdict"] == "PASS"


def test_symbols_rejects_bad_mu(capsys):
    assert main(["symbols", "--mu", "-1"]) == 1


def test_scan_and_report(tmp_path, capsys):
    path = write_cfg(tmp_path, scan={"mus": [0.1], "alphas": [3.7, 3.8], "seeds": [0],
                                      "horizon_factor": 1.0, "workers": 1})
    out = tmp_path / "scan"
    assert main(["scan", "--config", str(path), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", "--scan", str(out)]) == 0
    text = capsys.readouterr().out
    assert "stable" in text and "operational" in text
    assert main(["report", "--scan", str(tmp_path / "missing")]) == 1


def test_waves_command(tmp_path, capsys):
    path = write_cfg(tmp_path, t_final=5.0, ny=1024, ly=400.0,
                     waves={"times": [1.0, 2.0, 5.0, 50.0]})
    assert main(["waves", "--config", str(path), "--out", str(tmp_path)]) == 0
    rows = [ln for ln in (tmp_path / "waves.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0].startswith("t,L2_theta1") and len(rows) == 4


def test_console_module_runs():
    r = subprocess.run([sys.executable, "-m", "couette_lab", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and r.stdout.strip()
