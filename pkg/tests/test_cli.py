import csv
import json

import numpy as np
import pytest
import yaml

from mmfp import cnn
from mmfp.channel import Environment
from mmfp.cli import main
from mmfp.config import from_dict, load_config
from mmfp.errors import ConfigError
from mmfp.harness import LabeledDataset, reference_nrmse

TINY = {
    "environment": {
        "seed": 5,
        "num_clusters": 3,
        "mpcs_per_cluster": 4,
        "vr_radius_range": [3.0, 6.0],
        "scatterer_radius_range": [10.0, 30.0],
        "area_side": 4.0,
        "num_antennas": 8,
        "array_first": [-10.0, -10.0],
        "num_subcarriers": 8,
    },
    "dataset": {"grid_spacing": 1.0, "n_test": 30},
    "training": {"num_cap_layers": 1, "kernels_per_layer": 2, "epochs": 4, "batch_size": 8, "learning_rate": 1e-2},
    "experiment": {"configs": [[1, 2, "transformed"]], "spacings": [1.0]},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        from_dict({"training": {"epoch": 3}})
    with pytest.raises(ConfigError):
        from_dict({"extra": 1})
    with pytest.raises(ConfigError):
        from_dict({}, profile="laptop")
    bad = tmp_path / "bad.yaml"
    bad.write_text("training: {learning_rate: -1}\n")
    assert run("generate", "--config", bad, "--out", tmp_path / "o") == 3


def test_config_profiles_and_json(tmp_path):
    paper = from_dict(profile="paper")
    assert (paper.environment.num_antennas, paper.environment.num_subcarriers) == (128, 128)
    assert paper.environment.area_side == 25.0
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"training": {"epochs": 7}}))
    cfg = load_config(path)
    assert cfg.profile == "desk" and cfg.training.epochs == 7
    assert from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_generate_default_config(tmp_path, capsys):
    out = tmp_path / "out"
    assert run("generate", "--out", out) == 0
    text = capsys.readouterr().out
    assert "N_train      1681" in text
    env = Environment.load(out / "environment.mmenv")
    train = LabeledDataset.load(out / "train.mmds")
    test = LabeledDataset.load(out / "test.mmds")
    assert len(train) == 1681 and len(test) == 2000
    assert train.environment_id == test.environment_id == env.environment_id
    assert train.metadata["config"]["profile"] == "desk"


def test_generate_unwritable_output(tmp_path, tiny, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("generate", "--config", tiny, "--out", blocker / "sub") == 2
    assert "I/O error" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv("MMFP_OUT", str(tmp_path / "env-out"))
    assert run("generate", "--config", tiny) == 0
    assert (tmp_path / "env-out" / "train.mmds").exists()


@pytest.fixture
def generated(tmp_path, tiny):
    out = tmp_path / "run"
    assert run("generate", "--config", tiny, "--out", out) == 0
    return out


def test_train_outputs(generated, tiny):
    assert run("train", "--config", tiny, "--out", generated) == 0
    model = cnn.load_model(generated / "model.mmcnn")
    train = LabeledDataset.load(generated / "train.mmds")
    assert bytes.fromhex(model.provenance["environment_id"]) == train.environment_id
    assert model.provenance["config"]["training"]["epochs"] == 4
    with open(generated / "model.loss.csv") as f:
        trace = list(csv.DictReader(f))
    assert [int(r["epoch"]) for r in trace] == [0, 1, 2, 3, 4]
    assert float(trace[-1]["loss"]) < float(trace[0]["loss"])
    assert (generated / "model.loss.png").stat().st_size > 0


def test_train_is_byte_identical(generated, tiny):
    a, b = generated / "a.mmcnn", generated / "b.mmcnn"
    assert run("train", "--config", tiny, "--out", generated, "--deterministic", "--model", a) == 0
    assert run("train", "--config", tiny, "--out", generated, "--deterministic", "--model", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run("train", "--config", tiny, "--out", generated, "--seed", 9, "--model", b) == 0
    assert a.read_bytes() != b.read_bytes()


def test_train_zero_epochs_keeps_initialization(generated, tiny, tmp_path):
    cfg = dict(TINY, training={**TINY["training"], "epochs": 0})
    path = tmp_path / "zero.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", path, "--out", generated) == 0
    model = cnn.load_model(generated / "model.mmcnn")
    train = LabeledDataset.load(generated / "train.mmds")
    init = cnn.init_model(model.hyper, train.input_shape)
    assert np.array_equal(model.get_params(), init.get_params())


def test_train_dimension_mismatch(generated, tiny, tmp_path):
    cfg = dict(TINY, environment={**TINY["environment"], "num_antennas": 16})
    path = tmp_path / "wide.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", path, "--out", generated) == 3


def test_evaluate_zero_model_hits_reference(generated, tiny):
    train = LabeledDataset.load(generated / "train.mmds")
    cfg = load_config(tiny)
    model = cnn.zero_model(cfg.hyperparams(), train.input_shape)
    model.provenance = {"environment_id": train.environment_id.hex(), "representation": "transformed"}
    cnn.save_model(model, generated / "model.mmcnn")
    # a larger test set so the sample NRMSE settles near its expectation
    big = dict(TINY, dataset={**TINY["dataset"], "n_test": 4000})
    path = generated / "big.yaml"
    path.write_text(yaml.safe_dump(big))
    assert run("generate", "--config", path, "--out", generated) == 0
    assert run("evaluate", "--config", path, "--out", generated, "--dump") == 0
    report = json.loads((generated / "evaluation.json").read_text())
    assert report["nrmse"] == pytest.approx(reference_nrmse(4.0), rel=0.05)
    assert report["config"]["dataset"]["n_test"] == 4000
    assert len((generated / "estimates.csv").read_text().splitlines()) == 4000 + 1
    assert (generated / "estimates.png").exists()


def test_evaluate_refuses_other_environment(generated, tiny, tmp_path):
    assert run("train", "--config", tiny, "--out", generated) == 0
    other = tmp_path / "other"
    assert run("generate", "--config", tiny, "--seed", 6, "--out", other) == 0
    code = run("evaluate", "--config", tiny, "--out", generated, "--test", other / "test.mmds")
    assert code == 4


def test_evaluate_missing_model(generated, tiny):
    assert run("evaluate", "--config", tiny, "--out", generated, "--model", generated / "nope.mmcnn") == 2


def test_train_divergence_exit_code(generated, tmp_path):
    cfg = dict(TINY, training={**TINY["training"], "learning_rate": 1e9, "tikhonov": 0.0})
    path = tmp_path / "hot.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", path, "--out", generated) == 5


def test_benchmark_and_experiment(tmp_path, tiny):
    out = tmp_path / "bench"
    assert run("benchmark", "--config", tiny, "--out", out) == 0
    with open(out / "benchmark.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["config"] for r in rows] == ["cnn", "baseline"]
    assert (out / "benchmark.png").exists()
    assert json.loads((out / "benchmark.json").read_text())["config"]["experiment"]["spacings"] == [1.0]
    assert run("experiment", "--config", tiny, "--out", out) == 0
    with open(out / "experiment.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["config"] for r in rows] == ["cnn_L1_K2_transformed", "reference"]
    assert (out / "experiment.png").exists() and (out / "experiment_best.png").exists()
