from __future__ import annotations

import json

import numpy as np
import pytest
from _helpers import fixture_records
from filelock import FileLock
from pydantic import ValidationError

from eqvl.cli import main
from eqvl.config import RunConfig, load_config
from eqvl.datagen import read_dataset
from eqvl.losses import LossConfig
from eqvl.trainer import TrainConfig, session_dir, session_seeds, write_session_json

SMALL = {
    "n_sessions": 2,
    "datagen": {"size": 16, "n_train": 8, "n_validation": 2, "n_test": 4, "contrast": 5.0},
    "train": {"total_iterations": 20, "checkpoint_every": 10, "width": 4, "batch_size": 2},
    "analysis": {"resamples": 300, "compare_first": 2},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMALL))
    return p


def _errors(capsys):
    return json.loads(capsys.readouterr().err)["errors"]


def test_config_defaults_and_validation(tmp_path):
    cfg = load_config(env={})
    assert cfg.n_sessions == 16 and cfg.datagen.size == 32 and cfg.train.total_iterations == 4000
    assert cfg.methods == ["baseline", "simple-addition", "sigmoid", "arctan"]
    assert load_config(env={"EQVL_SEED": "77"}).master_seed == 77
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"bogus": 1})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"datagen": {"size": 20}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"version": 2})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"methods": ["nope"]})
    tc = RunConfig().train.train_config("arctan")
    assert tc == TrainConfig(loss=LossConfig(method="arctan"))
    assert json.loads(RunConfig().echo())["analysis"]["rel_epsilon"] == 0.00125


def test_generate(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 0
    manifest = json.loads((out / "data" / "dataset.json").read_text())
    assert json.loads((out / "config.generate.json").read_text())["datagen"]["size"] == 16
    scales = set()
    for split, n in (("train", 8), ("validation", 2), ("test", 4)):
        ds = read_dataset(out / "data" / f"{split}.eqvd")
        info = manifest["splits"][split]
        assert len(ds) == n == info["count"] and ds.split == split
        assert info["residual_max"] <= manifest["tolerance"]
        assert max(info["rms_divergence_normalized"]) <= 1e-3
        assert np.max(np.abs(ds.targets())) <= 1.0
        scales.add(ds.norm_scale)
    assert scales == {manifest["norm_scale"]}
    before = (out / "data" / "train.eqvd").read_bytes()
    assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 1
    assert "refusing to overwrite" in _errors(capsys)[0]
    assert main(["generate", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0
    assert (out / "data" / "train.eqvd").read_bytes() == before


def test_train_analyze_inspect(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    base = ["--config", str(cfg_path), "--out", str(out)]
    assert main(["train", *base]) == 1
    assert "dataset missing" in _errors(capsys)[0]
    assert main(["generate", *base]) == 0
    assert main(["train", *base, "--method", "baseline", "--sessions", "3"]) == 0
    seeds = json.loads((out / "runs" / "baseline" / "study.json").read_text())["seeds"]
    assert seeds == session_seeds(0, 3)
    for s in seeds:
        doc = json.loads((session_dir(out, "baseline", s) / "session.json").read_text())
        assert doc["status"] == "complete"

    # single-method study: no normalized table
    assert main(["analyze", str(out), "--config", str(cfg_path)]) == 0
    report = json.loads((out / "report" / "report.json").read_text())
    assert report["normalized"] is None and report["notes"]
    assert not (out / "report" / "normalized.csv").exists()
    assert "generated_at" not in report
    assert "generated_at" in json.loads((out / "report" / "report.meta.json").read_text())

    # inspect: identity, zero, and a trained checkpoint
    test_path = out / "data" / "test.eqvd"
    target = read_dataset(test_path).pairs[1].target.data
    assert main(["inspect", "--checkpoint", "identity", "--dataset", str(test_path), "--index", "1",
                 "--out", str(tmp_path / "id")]) == 0
    assert json.loads((tmp_path / "id" / "metrics.json").read_text())["mse_sigma"] == 0.0
    assert main(["inspect", "--checkpoint", "zero", "--dataset", str(test_path), "--index", "1",
                 "--out", str(tmp_path / "zero")]) == 0
    zero = json.loads((tmp_path / "zero" / "metrics.json").read_text())
    assert zero["mse_sigma"] == pytest.approx(np.mean(target ** 2), rel=1e-14)
    grid = np.loadtxt(tmp_path / "zero" / "target_s22.csv", delimiter=",")
    assert np.array_equal(grid, target[1])
    ck = session_dir(out, "baseline", seeds[0]) / "checkpoints" / "iter-20.eqck"
    assert main(["inspect", "--checkpoint", str(ck), "--dataset", str(test_path),
                 "--out", str(tmp_path / "ck")]) == 0
    m = json.loads((tmp_path / "ck" / "metrics.json").read_text())
    assert len(m["high_freq_energy_ratio"]) == 10
    assert all(0.0 <= v <= 1.0 for v in m["high_freq_energy_ratio"].values())
    assert main(["inspect", "--checkpoint", "zero", "--dataset", str(test_path), "--index", "4"]) == 1
    assert "out of range" in _errors(capsys)[0]


def test_analyze_requires_two_completed(tmp_path, capsys):
    recs = fixture_records()["baseline"][:1]
    root = tmp_path / "r"
    for r in recs:
        d = session_dir(root, "baseline", r.session_seed)
        d.mkdir(parents=True)
        write_session_json(d / "session.json", TrainConfig(), r)
    assert main(["analyze", str(root)]) == 1
    assert "insufficient" in _errors(capsys)[0]
    assert main(["analyze", str(tmp_path / "empty")]) == 1


def test_analyze_reference_fixture(tmp_path):
    root = tmp_path / "fixture"
    for method, recs in fixture_records().items():
        for r in recs:
            d = session_dir(root, method, r.session_seed)
            d.mkdir(parents=True)
            write_session_json(d / "session.json", TrainConfig(loss=LossConfig(method=method)), r)
    assert main(["analyze", str(root)]) == 0
    rows = {line.split(",")[0]: line.split(",") for line in (root / "report" / "normalized.csv").read_text().splitlines()}
    assert rows["sigmoid"][3] == "1.01"
    assert abs(float(rows["sigmoid"][2]) - 0.27) <= 0.02


def test_lock_and_bad_config(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    with FileLock(str(out / ".eqvl.lock")):
        assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 1
    assert "lock" in _errors(capsys)[0]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"total_iterations": 30, "checkpoint_every": 7}}))
    assert main(["generate", "--config", str(bad), "--out", str(out)]) == 1
    assert "ValidationError" in _errors(capsys)[0]
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "nope"])
    assert exc.value.code == 2


def test_seed_env_override(tmp_path, cfg_path, monkeypatch):
    out = tmp_path / "run"
    base = ["--config", str(cfg_path), "--out", str(out)]
    assert main(["generate", *base]) == 0
    monkeypatch.setenv("EQVL_SEED", "123")
    assert main(["train", *base, "--method", "arctan"]) == 0
    assert json.loads((out / "config.train.json").read_text())["master_seed"] == 123
    assert json.loads((out / "runs" / "arctan" / "study.json").read_text())["seeds"] == session_seeds(123, 2)
