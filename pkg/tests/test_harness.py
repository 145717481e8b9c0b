import json

import jsonschema
import numpy as np
import pytest
import yaml

from anchorsense.harness import cli
from anchorsense.harness.config import _merge, load_scenario
from anchorsense.harness.pipeline import TrialResult, parse_stages, run_trial, trial_streams
from anchorsense.harness.sweep import (Accumulator, RunConfig, compare_theory, read_rows,
                                       run_sweep, worker_count)


def test_default_scenario(scenario):
    sc = scenario.scene
    assert (sc.ue_position.x, sc.ue_position.y) == (60.0, 40.0)
    assert np.rad2deg(sc.ue_rotation_rho) == pytest.approx(20.0)
    assert len(sc.anchors) == 2 and len(sc.dynamic_targets) == 3
    assert len(sc.static_objects) == 15
    assert scenario.reference_tmo * 3e8 == pytest.approx(205.6)
    assert scenario.waveform.max_range == pytest.approx(625.0)
    # statics are scaled to 11 dB above the dynamic power
    assert 10 * np.log10(scenario.static_power / scenario.dynamic_power) == pytest.approx(11.0)
    assert 10 * np.log10(scenario.static_power / scenario.noise_power()) == pytest.approx(4.13)


def test_schema_rejects_unknown_keys():
    with pytest.raises(jsonschema.ValidationError):
        load_scenario(overrides={"sync": {"bogus": 1}})
    with pytest.raises(jsonschema.ValidationError):
        load_scenario(overrides={"dynamics": [{"position": [1, 2]}]})


def test_overrides_and_physical_noise():
    sc = load_scenario(overrides={"noise": {"snr_s_db": None}, "clock": {"reference_tmo_m": 0}})
    assert sc.noise_power() == pytest.approx(1.380649e-23 * 10 * 290 * 122.88e6)
    assert sc.reference_tmo == 0.0
    assert _merge({"a": {"b": 1, "c": 2}}, {"a": {"b": 3}}) == {"a": {"b": 3, "c": 2}}


def test_set_parsing():
    out = cli._parse_sets(["noise.snr_s_db=10", "sync.cancel_dynamic=false", "los=true"])
    assert out == {"noise": {"snr_s_db": 10}, "sync": {"cancel_dynamic": False}, "los": True}
    with pytest.raises(SystemExit):
        cli._parse_sets(["oops"])


def test_parse_stages():
    assert parse_stages("full") == {"coarse", "refined", "estimate", "locate"}
    assert parse_stages(["refined"]) == {"coarse", "refined"}
    assert "exact" in parse_stages("exact,estimate")
    with pytest.raises(ValueError):
        parse_stages("locate")
    with pytest.raises(ValueError):
        parse_stages("bogus")


def test_trial_streams_deterministic_and_distinct():
    a = [g.random(3) for g in trial_streams(7, 1, 2)]
    b = [g.random(3) for g in trial_streams(7, 1, 2)]
    c = [g.random(3) for g in trial_streams(7, 1, 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])
    assert not np.array_equal(a[0], a[1])


def test_accumulator_statistics():
    acc = Accumulator()
    for vals in ([1.0, -1.0], [3.0, np.nan]):
        r = TrialResult()
        r.add("m", vals)
        r.theory["m"] = 4.0
        acc.add(r)
    acc.add("ValueError: boom")
    s = acc.summary()
    assert s["m.count"] == 3 and s["m.nonfinite"] == 1
    assert s["m.rmse"] == pytest.approx(np.sqrt(11 / 3))
    assert s["m.bias"] == pytest.approx(1.0)
    assert s["m.var"] == pytest.approx(11 / 3 - 1)
    assert s["m.theory"] == pytest.approx(2.0)
    assert s["trial.failure_rate"] == pytest.approx(1 / 3)


def test_compare_theory():
    rows = [{"metric": "a.rmse", "grid_value": "1.0", "value": "1.1"},
            {"metric": "a.theory", "grid_value": "1.0", "value": "1.0"},
            {"metric": "b.rmse", "grid_value": "1.0", "value": "2.0"},
            {"metric": "b.theory", "grid_value": "1.0", "value": "1.0"},
            {"metric": "c.theory", "grid_value": "1.0", "value": "1.0"}]
    checks, notes = compare_theory(rows)
    assert [(c.metric, c.passed) for c in checks] == [("a", True), ("b", False)]
    assert len(notes) == 1 and "c.theory" in notes[0]


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(axis="nope")
    with pytest.raises(ValueError):
        RunConfig(axis="snr_s")
    with pytest.raises(ValueError):
        RunConfig(trials=0)
    assert np.isnan(RunConfig().grid[0])


def test_worker_env(monkeypatch):
    monkeypatch.setenv("ANCHORSENSE_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("ANCHORSENSE_WORKERS", "x")
    assert worker_count() == 1


def test_noise_free_trial_is_exact(scenario):
    res = run_trial(scenario, trial_streams(0, 0, 0), "exact,estimate,locate", noise_power=0.0)
    for key in ("ue.position", "ue.c_tau_o0", "target0.position", "target1.position",
                "target2.position", "anchor0.range", "anchor1.range"):
        assert np.max(np.abs(res.errors[key])) < 1e-6, key


def test_sweep_csv_is_byte_identical(tmp_path, scenario):
    cfg = dict(axis="anchor_aod_rmse", grid=(0.02, 0.1), trials=20, seed=3)
    run_sweep(RunConfig(out_dir=str(tmp_path / "a"), **cfg), scenario, workers=1)
    run_sweep(RunConfig(out_dir=str(tmp_path / "b"), **cfg), scenario, workers=2)
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["run"]["seed"] == 3 and man["points"][0]["failures"] == 0
    rows = read_rows(tmp_path / "a" / "results.csv")
    assert {"ue.position.rmse", "ue.position.theory", "trial.failure_rate"} <= {
        r["metric"] for r in rows}


def test_sync_sweep_deterministic(tmp_path, scenario):
    cfg = dict(axis="snr_s", grid=(10.0,), trials=2, seed=1, stages=("refined",))
    a = run_sweep(RunConfig(out_dir=str(tmp_path / "a"), **cfg), scenario)
    b = run_sweep(RunConfig(out_dir=str(tmp_path / "b"), **cfg), scenario)
    assert a == b
    metrics = {r["metric"] for r in a}
    assert "sync.refined.rtmo.rmse" in metrics and "sync.refined.rtmo.theory" in metrics


def test_cli_theory(tmp_path, capsys):
    assert cli.main(["theory", "--out", str(tmp_path), "--trials", "2", "--grid", "0,10"]) == 0
    rows = read_rows(tmp_path / "theory.csv")
    ratio = [float(r["value"]) for r in rows if r["metric"] == "sync.influence_ratio"]
    assert ratio and ratio[0] < 0.1
    rt = {r["grid_value"]: float(r["value"]) for r in rows
          if r["metric"] == "sync.refined.rtmo.theory"}
    assert rt["0.0"] / rt["10.0"] == pytest.approx(np.sqrt(10), rel=1e-9)
    assert "wrote" in capsys.readouterr().out


def test_cli_run(tmp_path, capsys):
    args = ["run", "--out", str(tmp_path), "--trials", "50", "--sweep", "anchor_range_rmse",
            "--grid", "0.01,0.05"]
    assert cli.main(args) == 0
    out = capsys.readouterr().out
    assert "ue.position" in out and (tmp_path / "manifest.json").exists()


def test_cli_demo(tmp_path, capsys):
    assert cli.main(["demo", "--out", str(tmp_path), "--dump-csi"]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    ue = summary["localization"]["ue_position"]
    assert np.hypot(ue[0] - 60.0, ue[1] - 40.0) < 1.0
    assert len(summary["dynamic"]) == 3
    header = (tmp_path / "range_doppler.csv").read_text().splitlines()[0]
    assert header == "range_m,doppler_hz,power"
    assert (tmp_path / "music_anchor0.csv").exists() and (tmp_path / "csi.bin").exists()


def test_shipped_yaml_is_valid():
    from anchorsense.harness.config import _data_file, load_schema

    jsonschema.validate(yaml.safe_load(_data_file("paper_scenario.yaml").read_text()),
                        load_schema())
