import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from spde_smp import io as rio
from spde_smp.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from spde_smp.config import dumps
from spde_smp.errors import ConfigurationError
from spde_smp.fixtures import fixture
from spde_smp.problem import ControlProcess

ORACLES = json.loads((Path(__file__).parent / "data" / "oracles.json").read_text())


def _write(tmp_path, name, cfg):
    p = tmp_path / f"{name}.json"
    p.write_text(dumps(cfg))
    return p


def _hashes(out):
    man = json.loads((Path(out) / rio.MANIFEST_NAME).read_text())
    return {k: v["sha256"] for k, v in man["artifacts"].items()}


def test_control_csv_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    u = ControlProcess(rng.standard_normal((7, 2)) / 3, 0.1)
    back = rio.read_control_csv(rio.write_control_csv(tmp_path / "u.csv", u))
    assert np.array_equal(back.values, u.values) and back.dt == u.dt


def test_summary_and_trace_roundtrip(tmp_path):
    mean = np.arange(6.0).reshape(3, 2) / 7
    se = mean / 11
    t, m, s = rio.read_state_summary_csv(rio.write_state_summary_csv(tmp_path / "s.csv",
                                                                      mean, se, 0.5))
    assert np.array_equal(m, mean) and np.array_equal(s, se) and np.array_equal(t, [0, .5, 1])
    rows = [{"iteration": 0, "epsilon": 1.0, "J": 0.1 / 3, "J_reference": 0.0, "J_eps": 1.0,
             "lambda": 0.6, "mu": 0.8, "constraint": -1e-17, "mp_residual": 0.0,
             "inner_iterations": 3, "noise_seed": 7}]
    assert rio.read_trace_csv(rio.write_trace_csv(tmp_path / "t.csv", rows)) == rows


def test_manifest_rejects_duplicates_and_missing(tmp_path):
    man = rio.RunManifest("simulate", {}, {}, {})
    f = rio.write_json(tmp_path / "a.json", {})
    man.add("a", f, tmp_path)
    with pytest.raises(ConfigurationError):
        man.add("a", f, tmp_path)
    mp = man.write(tmp_path)
    f.unlink()
    with pytest.raises(FileNotFoundError):
        rio.RunManifest.load(mp).artifact_path(mp, "a")


def test_simulate_zero_problem(tmp_path):
    cfg = _write(tmp_path, "zero", fixture("zero"))
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    states = np.load(tmp_path / "o" / "states.npy")
    assert np.all(states == np.array([0.5, -1.0, 2.0]))
    cost = json.loads((tmp_path / "o" / "cost.json").read_text())
    assert cost["J"] == 0.0
    _, mean, se = rio.read_state_summary_csv(tmp_path / "o" / "state_summary.csv")
    assert np.all(mean == mean[0]) and np.all(se == 0)


def test_simulate_twice_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=300, n_steps=20))
    for d in ("a", "b"):
        assert main(["simulate", str(cfg), "--out", str(tmp_path / d)]) == EXIT_OK
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")


def test_thread_count_does_not_change_results(tmp_path, monkeypatch):
    monkeypatch.setenv("SPDE_SMP_THREADS", "1")
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=5000, n_steps=10))
    assert main(["--threads", "1", "simulate", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["--threads", "4", "simulate", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")


def test_heat_decay_matches_scheme(tmp_path):
    cfg = _write(tmp_path, "heat", fixture("heat_decay"))
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    _, mean, _ = rio.read_state_summary_csv(tmp_path / "o" / "state_summary.csv")
    assert mean[-1, 0] == pytest.approx(ORACLES["heat_scheme_mode1"], rel=1e-12)
    assert np.all(mean[:, 1:] == 0)


def test_manifest_replay_reproduces_artifacts(tmp_path):
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=200, n_steps=20))
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "a"), "--seed", "31"]) == 0
    man = tmp_path / "a" / rio.MANIFEST_NAME
    assert main(["simulate", str(man), "--out", str(tmp_path / "b")]) == 0
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")


def test_adjoint_command_writes_duality(tmp_path):
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=400, n_steps=20))
    out = tmp_path / "o"
    assert main(["adjoint", str(cfg), "--out", str(out), "--lambda", "0.6", "--mu", "0.8"]) == 0
    rep = json.loads((out / "duality.json").read_text())
    assert rep["multipliers"]["lambda"] == 0.6 and rep["passed"]
    with np.load(out / "adjoint.npz") as z:
        assert z["p"].shape == np.load(out / "states.npy").shape


def test_optimize_zero_outer_keeps_initial_control(tmp_path):
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=100, n_steps=10))
    out = tmp_path / "o"
    assert main(["optimize", str(cfg), "--out", str(out), "--max-outer", "0"]) == EXIT_OK
    u = rio.read_control_csv(out / "control.csv")
    assert np.all(u.values == 0)
    assert rio.read_trace_csv(out / "trace.csv") == []


def test_verify_exit_codes(tmp_path, capsys):
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=500, n_steps=20))
    assert main(["verify", str(cfg), "--only", "partials"]) == EXIT_OK
    assert main(["verify", str(cfg), "--only", "partials", "--mutate", "drift_x"]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" in out


@pytest.mark.parametrize("argv", [
    ["simulate", "{bad}", "--out", "{out}"],
    ["simulate", "{missing}", "--out", "{out}"],
    ["verify", "{cfg}", "--mutate", "nonsense"],
])
def test_configuration_errors_exit_2(tmp_path, capsys, argv):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": 1,')
    cfg = _write(tmp_path, "zero", fixture("zero"))
    subs = {"bad": bad, "missing": tmp_path / "nope.json", "out": tmp_path / "o", "cfg": cfg}
    assert main([a.format(**subs) for a in argv]) == EXIT_CONFIG
    assert capsys.readouterr().err.startswith("error:")


def test_singular_step_exits_3(tmp_path, capsys):
    cfg = fixture("zero")
    cfg["operators"]["A"] = (10.0 * np.eye(3)).tolist()    # I - dt A = 0 at dt = 0.1
    p = _write(tmp_path, "sing", cfg)
    assert main(["simulate", str(p), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
    assert "step" in capsys.readouterr().err


def _svgs_ok(files):
    assert len(files) == 4
    for f in files:
        root = ET.parse(f).getroot()
        assert root.tag.endswith("svg")


def test_report_from_optimize_and_simulate(tmp_path, capsys):
    cfg = _write(tmp_path, "lq", fixture("lq_constrained", n_paths=200, n_steps=10))
    assert main(["optimize", str(cfg), "--out", str(tmp_path / "opt"), "--max-outer", "1"]) == 0
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "sim")]) == 0
    capsys.readouterr()
    for run in ("opt", "sim"):
        rep = tmp_path / f"rep_{run}"
        assert main(["report", str(tmp_path / run / rio.MANIFEST_NAME), "--out", str(rep)]) == 0
        _svgs_ok(sorted(rep.glob("*.svg")))
    # rendering is deterministic
    again = tmp_path / "rep_again"
    main(["report", str(tmp_path / "opt" / rio.MANIFEST_NAME), "--out", str(again)])
    for f in sorted(again.glob("*.svg")):
        assert f.read_bytes() == (tmp_path / "rep_opt" / f.name).read_bytes()


def test_report_names_missing_artifact(tmp_path, capsys):
    cfg = _write(tmp_path, "zero", fixture("zero"))
    main(["simulate", str(cfg), "--out", str(tmp_path / "o")])
    (tmp_path / "o" / "control.csv").unlink()
    assert main(["report", str(tmp_path / "o" / rio.MANIFEST_NAME), "--out",
                 str(tmp_path / "r")]) == EXIT_CONFIG
    assert "control.csv" in capsys.readouterr().err
