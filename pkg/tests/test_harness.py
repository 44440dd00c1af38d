import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlris_track.harness import cli
from xlris_track.harness import config as hc
from xlris_track.harness import pipeline as hp
from xlris_track.harness import report as rp
from xlris_track.seeding import child_seed

TINY = {
    "name": "tiny", "seed": 3,
    "trajectory": {"count": 6, "steps": 4},
    "snr_db": [0, 20],
    "recon": {"upsample_target": [8, 8], "epochs": 1, "blocks_per_module": 1,
              "growth_channels": 4, "max_train": 60},
    "features": {"n_f": 4, "filters": [4, 4], "cnn_epochs": 1, "resolution_deg": 15},
    "tracker": {"window": 3, "hidden": 4, "decoder_hidden": 4, "epochs": 2},
}


def tiny(**top):
    d = json.loads(json.dumps(TINY))
    d.update(top)
    return hc.config_from_dict(d)


# ---- config ----

def test_profiles_load_with_reference_geometry():
    for name in ("desk", "full"):
        cfg = hc.load_profile(name)
        assert cfg.geometry.ris_center == [6.0, 0.0, 2.0]
        assert cfg.geometry.bs_center == [0.0, 5.0, 1.5]
        assert (cfg.geometry.n1, cfg.geometry.n2, cfg.geometry.m1, cfg.geometry.m2) == (10, 10, 4, 4)
    assert hc.load_profile("desk").snr_db == [0.0, 10.0, 20.0]


def test_full_profile_scenario_positions():
    cfg = hc.load_profile("full")
    geom = hp.make_geometry(cfg)
    np.testing.assert_allclose(geom.ris_center, [6, 0, 2])
    np.testing.assert_allclose(geom.bs_position, [0, 5, 1.5])


def test_validation_is_aggregated():
    bad = json.loads(json.dumps(TINY))
    bad["geometry"] = {"n1": 9}
    bad["trajectory"]["steps"] = 2
    bad["tracker"]["layers"] = 1
    bad["stages"] = ["generate", "fly"]
    with pytest.raises(hc.ConfigError) as exc:
        hc.config_from_dict(bad)
    text = "\n".join(exc.value.errors)
    for needle in ("n1 (9)", "steps (2)", "layers", "fly"):
        assert needle in text
    assert len(exc.value.errors) >= 4


def test_unknown_and_mistyped_fields():
    with pytest.raises(hc.ConfigError) as exc:
        hc.config_from_dict({"trajectory": {"cuont": 5, "steps": "eleven"}, "bogus": 1})
    text = "\n".join(exc.value.errors)
    assert "cuont" in text and "steps" in text and "bogus" in text


def test_hash_ignores_stages_and_defaults():
    a = tiny()
    b = tiny(stages=["generate"])
    d = json.loads(json.dumps(TINY))
    d["scenario"] = {"n_scatterers": 9}  # explicit default
    assert a.config_hash() == b.config_hash() == hc.config_from_dict(d).config_hash()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([("seed", 4), ("snr_db", [0, 10]), ("trajectory", {"count": 7, "steps": 4}),
                        ("tracker", {"window": 3, "hidden": 5, "decoder_hidden": 4,
                                     "epochs": 2})]))
def test_hash_changes_with_meaningful_fields(change):
    key, value = change
    d = json.loads(json.dumps(TINY))
    d[key] = value
    assert hc.config_from_dict(d).config_hash() != tiny().config_hash()


def test_child_seed_derivation():
    assert child_seed(1, "a", 0) == child_seed(1, "a", 0)
    assert len({child_seed(1, "a", 0), child_seed(2, "a", 0), child_seed(1, "b", 0),
                child_seed(1, "a", 1)}) == 4


# ---- CSV ----

def test_mse_csv_header_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [{"snr_db": 10.0, "trajectory_kind": "wave", "input_source": "bs", "n_elements": 100,
             "mse_m2": float(rng.random() * 1e-3 + 1 / 3), "n_samples": 7}]
    path = rp.write_mse_csv(rows, tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "snr_db,trajectory_kind,input_source,n_elements,mse_m2,n_samples"
    assert len(lines) == 2
    assert rp.read_mse_csv(path) == rows


@settings(max_examples=200)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_seventeen_digit_roundtrip(x):
    assert float(rp.fmt(x)) == x


def test_loss_curve_roundtrip(tmp_path):
    curves = {"recon": [(0, 1.5, 2.25), (1, 0.1 + 0.2, 1 / 3)], "cnn/bs": [(1, 0.7, None)]}
    path = rp.write_loss_curves(curves, tmp_path / "l.csv")
    assert path.read_text().splitlines()[0] == "stage,epoch,train_loss,val_loss"
    assert rp.read_loss_curves(path) == curves


def test_report_rejects_duplicate_stage():
    r = rp.RunReport("h", 0, "d")
    r.record(rp.StageRecord("generate", "ran", 1.0))
    with pytest.raises(ValueError):
        r.record(rp.StageRecord("generate", "ran", 1.0))


# ---- pipeline ----

def test_empty_stage_list_writes_nothing(tmp_path):
    report = hp.run_pipeline(tiny(stages=[]), tmp_path / "out")
    assert report.stages == [] and not (tmp_path / "out").exists()


def test_tiny_pipeline_is_deterministic_and_idempotent(tmp_path):
    cfg = tiny()
    r1 = hp.run_pipeline(cfg, tmp_path / "a")
    r2 = hp.run_pipeline(cfg, tmp_path / "b")
    csv_a = (tmp_path / "a" / cfg.config_hash() / "results" / "mse_vs_snr.csv").read_bytes()
    csv_b = (tmp_path / "b" / cfg.config_hash() / "results" / "mse_vs_snr.csv").read_bytes()
    assert csv_a == csv_b
    assert [s.name for s in r1.stages] == list(hc.STAGES)
    assert all(s.status == "ran" for s in r1.stages)
    assert r1.mse_rows == r2.mse_rows
    keys = {(r["snr_db"], r["trajectory_kind"], r["input_source"]) for r in r1.mse_rows}
    assert len(keys) == 2 * 3 * 3
    # second invocation skips completed stages
    r3 = hp.run_pipeline(cfg, tmp_path / "a")
    assert all(s.status == "skipped" for s in r3.stages)


def test_force_rewrites_only_its_stage(tmp_path):
    cfg = tiny(stages=["generate", "train-recon"])
    pipe = hp.Pipeline(cfg, tmp_path)
    pipe.run(cfg.stages)
    data_marker = (pipe.stage_dir("generate") / "DONE").stat().st_mtime_ns
    before = (pipe.stage_dir("train-recon") / "model" / "params.bin").read_bytes()
    report = pipe.run(cfg.stages, force_stages=["train-recon"])
    assert [s.status for s in report.stages] == ["skipped", "ran"]
    assert (pipe.stage_dir("generate") / "DONE").stat().st_mtime_ns == data_marker
    assert (pipe.stage_dir("train-recon") / "model" / "params.bin").read_bytes() == before


def test_stage_failure_gives_partial_report(tmp_path):
    cfg = tiny(stages=["train-recon"])
    with pytest.raises(hp.StageFailure) as exc:
        hp.run_pipeline(cfg, tmp_path)
    report = json.loads((tmp_path / cfg.config_hash() / "report.json").read_text())
    assert report["stages"][0]["status"] == "failed"
    assert exc.value.stage == "train-recon"


def test_lock_held_by_live_process(tmp_path):
    cfg = tiny(stages=["generate"])
    run_dir = tmp_path / cfg.config_hash()
    run_dir.mkdir(parents=True)
    (run_dir / "run.lock").write_text(str(os.getppid()))
    with pytest.raises(hp.RunLockedError):
        hp.run_pipeline(cfg, tmp_path)
    (run_dir / "run.lock").write_text("999999999")  # dead pid: stale lock is taken over
    hp.run_pipeline(cfg, tmp_path)


# ---- CLI ----

def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"geometry": {"n1": 9}}))
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "n1 (9)" in capsys.readouterr().err
    good = tmp_path / "tiny.json"
    good.write_text(json.dumps(TINY))
    args = ["--config", str(good), "--out", str(tmp_path / "runs")]
    assert cli.main(["train-recon", "--stage-only"] + args) == 3
    assert cli.main(["generate"] + args) == 0
    assert cli.main(["train-recon", "--stage-only"] + args) == 0


def test_cli_seed_override_changes_run_dir(tmp_path):
    good = tmp_path / "tiny.json"
    good.write_text(json.dumps(TINY))
    for seed in (1, 2):
        assert cli.main(["generate", "--config", str(good), "--seed", str(seed),
                         "--out", str(tmp_path / "runs")]) == 0
    assert len(list((tmp_path / "runs").iterdir())) == 2


def test_stage_selection():
    assert cli.stages_for("extract-features", hc.STAGES, False) == list(hc.STAGES[:3])
    assert cli.stages_for("extract-features", hc.STAGES, True) == ["extract-features"]
    assert cli.stages_for("all", ["generate"], False) == ["generate"]
