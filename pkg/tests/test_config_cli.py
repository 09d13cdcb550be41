import json
import shutil

import pytest

from sintad import __version__
from sintad.cli import main
from sintad.config import PROFILES, ExperimentConfig, config_from_overrides, load_config

STAGES = ("gen", "train", "score", "eval", "report")


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "smoke.json"
    path.write_text(json.dumps({"profile": "smoke", "seed": 5}))
    return path


@pytest.fixture(scope="module")
def experiment(tmp_path_factory, smoke_config):
    out = tmp_path_factory.mktemp("exp")
    for stage in STAGES:
        assert run(stage, "--config", smoke_config, "--out", out) == 0
    return out


# -- config ------------------------------------------------------------------------

@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_config_round_trip(profile):
    cfg = config_from_overrides({"profile": profile})
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()


def test_defaults_profile_matches_published_settings():
    cfg = load_config()
    a = cfg.architecture
    assert (a.p, a.q, a.lam, a.epochs, a.val_fraction) == (3, 3, 1.0, 500, 0.2)
    assert cfg.detection.detrend_window == 20
    assert cfg.test_deviations == [13, 11, 9, 5, 3]


def test_seed_override_propagates(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"profile": "smoke", "seed": 1}))
    cfg = load_config(path, seed=9)
    assert cfg.seed == cfg.process.seed == cfg.architecture.seed == 9


def test_nested_override_merges_with_profile():
    cfg = config_from_overrides({"profile": "smoke", "architecture": {"epochs": 7}})
    assert cfg.architecture.epochs == 7 and cfg.architecture.base_width == 4


@pytest.mark.parametrize("bad,match", [
    ({"colour": 1}, "unknown config keys"),
    ({"profile": "huge"}, "unknown profile"),
    ({"paths": {"scores": "x", "eval": "x"}}, "distinct"),
    ({"process": {"frame_height": 48}}, "half the camera frame"),
])
def test_invalid_configs(bad, match):
    with pytest.raises(ValueError, match=match):
        config_from_overrides(bad)


def test_config_must_be_object(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("[1, 2]")
    with pytest.raises(ValueError, match="JSON object"):
        load_config(path)


# -- CLI -----------------------------------------------------------------------------

def test_full_run_summary(experiment):
    summary = json.loads((experiment / "report" / "summary.json").read_text())
    rows = summary["rows"]
    assert [r["deviation"] for r in rows] == [13, 11, 9, 5, 3]
    assert set(rows[0]) == {"layer", "deviation", "precision", "recall", "auc", "baseline_auc"}
    assert all(0 <= r["auc"] <= 1 for r in rows)


def test_every_stage_writes_run_manifest(experiment):
    for d in ("dataset", "model", "scores", "eval", "report"):
        m = json.loads((experiment / d / "run_manifest.json").read_text())
        assert m["tool_version"] == __version__
        assert m["config"]["profile"] == "smoke" and m["config"]["seed"] == 5
        assert m["outputs"] and all(len(h) == 64 for h in m["outputs"].values())
        assert "seconds" in m["timings"]
    score_inputs = json.loads((experiment / "scores" / "run_manifest.json").read_text())["inputs"]
    assert any(k.startswith("model") for k in score_inputs)


def test_score_outputs(experiment):
    scores = experiment / "scores"
    header = (scores / "layer_5.csv").read_text().splitlines()[0]
    assert header == "line,f_rec,f_reg,f_rec_detrended,f_reg_detrended,f_reg_normalized,flag,mask"
    assert (scores / "layer_5_baseline.csv").read_text().splitlines()[0] == header
    assert len((scores / "layer_5.csv").read_text().splitlines()) == 41
    pgm = (scores / "layer_5_f_reg.pgm").read_bytes()
    assert pgm.startswith(b"P5\n4 40\n65535\n") and len(pgm) == len(b"P5\n4 40\n65535\n") + 40 * 4 * 2
    cal = json.loads((scores / "calibration.json").read_text())
    assert cal["epsilon"] >= 0 and cal["p"] == 3


def test_no_training_false_positives(experiment):
    rep = json.loads((experiment / "eval" / "report.json").read_text())
    assert rep["training_false_positives"] == 0
    assert rep["layers"][0]["model"]["thresholds"][0] is None


def test_dataset_manifest_gets_normalization(experiment):
    m = json.loads((experiment / "dataset" / "manifest.json").read_text())
    model = json.loads((experiment / "model" / "model.json").read_text())
    assert m["normalization"] == model["normalization"]
    assert m["normalization"]["data_max"] > m["normalization"]["data_min"]


def test_stage_isolation(experiment, smoke_config, tmp_path):
    copy = tmp_path / "exp"
    shutil.copytree(experiment, copy)
    for d in ("scores", "eval", "report"):
        shutil.rmtree(copy / d)
    for stage in ("score", "eval", "report"):
        assert run(stage, "--config", smoke_config, "--out", copy) == 0
    for name in ("report/summary.json", "scores/layer_7.csv", "scores/calibration.json", "eval/report.json"):
        assert (copy / name).read_bytes() == (experiment / name).read_bytes()


def test_refuses_to_overwrite(experiment, smoke_config, capsys):
    assert run("gen", "--config", smoke_config, "--out", experiment) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["stage"] == "gen" and "--overwrite" in err["error"]


def test_eval_without_scores_names_path(experiment, smoke_config, tmp_path, capsys):
    copy = tmp_path / "exp"
    shutil.copytree(experiment / "dataset", copy / "dataset")
    assert run("eval", "--config", smoke_config, "--out", copy) != 0
    err = json.loads(capsys.readouterr().err)
    assert err["path"].endswith("calibration.json") and "calibration.json" in err["error"]


def test_eval_missing_layer_csv(experiment, smoke_config, tmp_path, capsys):
    copy = tmp_path / "exp"
    shutil.copytree(experiment, copy)
    (copy / "scores" / "layer_6.csv").unlink()
    assert run("eval", "--config", smoke_config, "--out", copy, "--overwrite") != 0
    err = json.loads(capsys.readouterr().err)
    assert err["path"].endswith("layer_6.csv")


def test_score_rejects_corrupt_layer(experiment, smoke_config, tmp_path, capsys):
    copy = tmp_path / "exp"
    shutil.copytree(experiment, copy)
    path = copy / "dataset" / "layer_8.f32"
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    assert run("score", "--config", smoke_config, "--out", copy, "--overwrite") != 0
    assert "checksum" in json.loads(capsys.readouterr().err)["error"]


def test_score_rejects_stale_normalization(experiment, smoke_config, tmp_path, capsys):
    copy = tmp_path / "exp"
    shutil.copytree(experiment, copy)
    mpath = copy / "dataset" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["normalization"]["data_max"] += 1.0
    mpath.write_text(json.dumps(m))
    assert run("score", "--config", smoke_config, "--out", copy, "--overwrite") != 0
    assert "normalization" in json.loads(capsys.readouterr().err)["error"]


def test_train_without_dataset(tmp_path, smoke_config, capsys):
    assert run("train", "--config", smoke_config, "--out", tmp_path) != 0
    assert json.loads(capsys.readouterr().err)["path"].endswith("manifest.json")


def test_score_single_layer(experiment, smoke_config, tmp_path):
    copy = tmp_path / "exp"
    shutil.copytree(experiment, copy)
    assert run("score", "--config", smoke_config, "--out", copy, "--overwrite", "--layer", 9) == 0
    names = {p.name for p in (copy / "scores").iterdir()}
    assert "layer_9.csv" in names and "layer_5.csv" not in names
    assert (copy / "scores" / "layer_9.csv").read_bytes() == (experiment / "scores" / "layer_9.csv").read_bytes()


def test_report_accepts_explicit_paths(experiment, smoke_config, tmp_path, capsys):
    out = tmp_path / "r"
    assert run("report", "--config", smoke_config, "--out", out, experiment / "eval" / "report.json") == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].startswith("| layer | deviation | precision | recall | AUC")
    assert (out / "report" / "summary.json").read_bytes() == (experiment / "report" / "summary.json").read_bytes()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out
