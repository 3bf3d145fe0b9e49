import csv

import numpy as np
import pytest

from mmfp import cnn
from mmfp.channel import Area, build_environment
from mmfp.errors import ConfigError, FormatError, ProvenanceError
from mmfp.harness import (
    REPORT_HEADER,
    LabeledDataset,
    evaluate,
    grid_positions,
    make_test_set,
    make_training_grid,
    matched_epochs,
    nrmse,
    reference_nrmse,
    require_same_environment,
    run_accuracy_experiment,
    run_spacing_experiment,
    sample_positions,
    to_db,
    write_estimates,
    write_report,
)
from mmfp.transform import forward_transform, unpack

from conftest import small_config


@pytest.mark.parametrize(
    "side, spacing, count", [(25.0, 0.25, 10201), (25.0, 25.0, 4), (4.0, 1.0, 25), (10.0, 0.25, 1681)]
)
def test_grid_sizes(side, spacing, count):
    assert len(grid_positions(Area.centered(side), spacing)) == count


def test_grid_is_exact_lattice():
    area = Area.centered(4.0)
    pts = grid_positions(area, 1.0)
    offsets = pts - np.asarray(area.lower)
    assert np.array_equal(offsets, np.round(offsets))
    assert offsets.min() == 0 and offsets.max() == 4
    corners = grid_positions(Area.centered(25.0), 25.0)
    assert {tuple(p) for p in corners} == {(-12.5, -12.5), (-12.5, 12.5), (12.5, -12.5), (12.5, 12.5)}


@pytest.mark.parametrize("spacing", [0.0, -1.0, 5.0])
def test_grid_rejects_bad_spacing(spacing):
    with pytest.raises(ConfigError):
        grid_positions(Area.centered(4.0), spacing)


def test_training_grid_fingerprints(small_env):
    ds = make_training_grid(small_env, 1.0)
    assert len(ds) == 25 and ds.kind == "training-grid" and ds.grid_spacing == 1.0
    assert ds.input_shape == (8, 8, 2)
    assert ds.environment_id == small_env.environment_id
    raw = make_training_grid(small_env, 1.0, "raw")
    assert np.allclose(ds.tensors, forward_transform(unpack(raw.tensors)), atol=1e-15)
    assert np.allclose(ds.snapshots(), raw.snapshots(), atol=1e-15)


def test_test_set_deterministic_and_inside(small_env):
    a = make_test_set(small_env, 50, seed=3)
    b = make_test_set(small_env, 50, seed=3)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.tensors, b.tensors)
    assert np.all(small_env.area.contains(a.positions))
    assert a.kind == "random-test"


def test_uniform_moments():
    area = Area.centered(25.0)
    pos = sample_positions(area, 10_000, seed=0)
    assert np.all(np.abs(pos.mean(axis=0)) <= 0.5)
    assert np.allclose(pos.var(axis=0), 25.0**2 / 12, rtol=0.05)


def test_nrmse_values():
    assert nrmse([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert nrmse([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    with pytest.raises(ConfigError):
        nrmse([[0.0, 0.0]], [[1.0, 1.0], [2.0, 2.0]])


def test_db_convention():
    assert np.isclose(to_db(0.5), -6.0206, atol=1e-4)


def test_reference_level():
    assert round(reference_nrmse(Area.centered(25.0)), 3) == 10.206
    assert reference_nrmse(0.0) == 0.0
    assert round(reference_nrmse(50.0), 2) == 20.41
    assert np.isclose(reference_nrmse(Area((0.0, 0.0), (25.0, 25.0))), reference_nrmse(25.0))


def test_zero_estimator_hits_reference():
    area = Area.centered(25.0)
    pos = sample_positions(area, 10_000, seed=1)
    assert abs(nrmse(np.zeros_like(pos), pos) - 10.2) <= 0.2


def test_dataset_file_round_trip(small_env, tmp_path):
    ds = make_test_set(small_env, 7, seed=2)
    ds.metadata = {"run": {"seed": 2}}
    path = tmp_path / "test.mmds"
    ds.save(path)
    data = path.read_bytes()
    assert data[:5] == b"MMDS1"
    back = LabeledDataset.load(path)
    assert np.array_equal(back.tensors, ds.tensors)
    assert np.array_equal(back.positions, ds.positions)
    assert back.environment_id == small_env.environment_id
    assert (back.kind, back.representation, back.metadata) == ("random-test", "transformed", ds.metadata)
    # first sample: 2 position floats then M*N_F*2 values, antenna-major
    head = 5 + 4 + 4 + 1 + 4 + 8 + 1 + 32
    first = np.frombuffer(data, "<f8", 2 + 8 * 8 * 2, head)
    assert np.array_equal(first[:2], ds.positions[0])
    assert np.array_equal(first[2:], ds.tensors[0].ravel())
    with pytest.raises(FormatError):
        LabeledDataset.from_bytes(b"XXXXX" + data[5:])


def test_environment_mismatch_refused(small_env):
    other = build_environment(8, small_config())
    a = make_test_set(small_env, 3, seed=0)
    b = make_test_set(other, 3, seed=0)
    require_same_environment(a, make_test_set(small_env, 3, seed=1))
    with pytest.raises(ProvenanceError):
        require_same_environment(a, b)


def test_evaluate_zero_estimator(small_env):
    ds = make_test_set(small_env, 20, seed=0)
    rep = evaluate(lambda d: np.zeros((len(d), 2)), ds, {"name": "zero"})
    assert np.isclose(rep.nrmse, np.sqrt(np.mean(rep.per_sample_errors**2)))
    assert rep.config_snapshot == {"name": "zero"}


def test_accuracy_experiment_plumbing(small_env, tmp_path):
    assert run_accuracy_experiment(small_env, [], cnn.Hyperparams()) == []
    hp = cnn.Hyperparams(1, 2, 3, 3, 2, 2, 1e-3, 1e-2, 8, 2, 0)
    rows = run_accuracy_experiment(small_env, [(1, 2, "transformed"), (1, 2, "raw")], hp,
                                   spacing=1.0, n_test=10)
    assert [r.config for r in rows] == ["cnn_L1_K2_transformed", "cnn_L1_K2_raw", "reference"]
    assert rows[-1].nrmse == reference_nrmse(small_env.area)
    out = tmp_path / "acc.csv"
    write_report(rows, out)
    with open(out) as f:
        table = list(csv.reader(f))
    assert table[0] == REPORT_HEADER
    assert len(table) == 4
    est = tmp_path / "est.csv"
    write_estimates(est, np.zeros((10, 2)), {r.config: r.estimates for r in rows[:2]})
    assert len(est.read_text().splitlines()) == 21


def test_accuracy_experiment_records_divergence(small_env):
    hp = cnn.Hyperparams(1, 2, 3, 3, 2, 2, 0.0, 1e9, 4, 3, 0)
    rows = run_accuracy_experiment(small_env, [(1, 2, "transformed")], hp, spacing=1.0, n_test=5)
    assert "diverged" in rows[0].error
    assert np.isnan(rows[0].nrmse)


def test_spacing_experiment_plumbing(small_env):
    hp = cnn.Hyperparams(1, 2, 3, 3, 2, 2, 1e-3, 1e-2, 8, 2, 0)
    rows = run_spacing_experiment(small_env, [1.0], hp, n_test=40)
    assert [r.config for r in rows] == ["cnn", "baseline"]
    floor = 1.0 / np.sqrt(6)
    assert rows[1].nrmse >= 0.9 * floor
    with pytest.raises(ConfigError):
        run_spacing_experiment(small_env, [1.0, 0.5], hp)


def test_matched_epochs():
    # 1681 samples in batches of 32 is 53 steps per epoch
    assert matched_epochs(30 * 53, 1681, 32) == 30
    assert matched_epochs(30 * 53, 121, 32) == 398
    assert matched_epochs(30 * 53, 9, 32) == 1590
    assert matched_epochs(0, 9, 32) == 0


def test_baseline_error_grows_with_spacing():
    env = build_environment(3, small_config(area=Area.centered(8.0)))
    hp = cnn.Hyperparams(1, 2, 3, 3, 2, 2, 1e-3, 1e-2, 8, 1, 0)
    rows = run_spacing_experiment(env, [0.5, 1.0, 2.0, 4.0], hp, n_test=300)
    base = [r.nrmse for r in rows if r.config == "baseline"]
    assert all(b >= 0.9 * a for a, b in zip(base, base[1:]))
    assert all(b >= 0.9 * s / np.sqrt(6) for b, s in zip(base, [0.5, 1.0, 2.0, 4.0]))
