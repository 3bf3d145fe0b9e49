"""Datasets, error metrics and the two positioning experiments."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from mmfp import cnn
from mmfp.baseline import FingerprintDatabase, classify
from mmfp.channel import Area, Environment, synthesize_snapshots
from mmfp.errors import ConfigError, FormatError, ProvenanceError, TrainingDivergedError
from mmfp.transform import REPRESENTATIONS, to_snapshot

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MMDS1"
REPORT_HEADER = ["config", "L", "K", "representation", "spacing_lambda", "nrmse", "nrmse_db", "train_seconds"]
_REPR_FLAG = {"transformed": 0, "raw": 1}
_KIND_FLAG = {"training-grid": 0, "random-test": 1}


@dataclass(eq=False)
class LabeledDataset:
    tensors: np.ndarray  # (N, M, N_F, 2)
    positions: np.ndarray  # (N, 2)
    representation: str
    kind: str
    environment_id: bytes
    grid_spacing: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.positions)

    @property
    def input_shape(self):
        return self.tensors.shape[1:]

    def snapshots(self) -> np.ndarray:
        return to_snapshot(self.tensors, self.representation)

    def to_bytes(self) -> bytes:
        n, m, nf, _ = self.tensors.shape
        head = struct.pack(
            "<IIBIdB32s",
            m,
            nf,
            _REPR_FLAG[self.representation],
            n,
            self.grid_spacing,
            _KIND_FLAG[self.kind],
            self.environment_id,
        )
        body = np.concatenate(
            [self.positions.reshape(n, 2), self.tensors.reshape(n, -1)], axis=1
        ).astype("<f8")
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        return b"".join([DATASET_MAGIC, head, body.tobytes(), struct.pack("<I", len(meta)), meta])

    @classmethod
    def from_bytes(cls, data: bytes) -> LabeledDataset:
        if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
            raise FormatError("not an MMDS1 dataset file")
        head = struct.Struct("<IIBIdB32s")
        off = len(DATASET_MAGIC)
        try:
            m, nf, rflag, n, spacing, kflag, env_id = head.unpack_from(data, off)
            off += head.size
            row = 2 + m * nf * 2
            body = np.frombuffer(data, "<f8", n * row, off).reshape(n, row).astype(float)
            off += 8 * n * row
            (k,) = struct.unpack_from("<I", data, off)
            meta = json.loads(data[off + 4 : off + 4 + k].decode()) if k else {}
        except (struct.error, ValueError) as exc:
            raise FormatError(f"corrupt dataset file: {exc}") from None
        reprs = {v: k for k, v in _REPR_FLAG.items()}
        kinds = {v: k for k, v in _KIND_FLAG.items()}
        return cls(
            body[:, 2:].reshape(n, m, nf, 2),
            body[:, :2].copy(),
            reprs[rflag],
            kinds[kflag],
            env_id,
            spacing,
            meta,
        )

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> LabeledDataset:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def require_same_environment(*items):
    ids = {getattr(it, "environment_id", it) for it in items}
    if len(ids) > 1:
        raise ProvenanceError("train/test environments differ")


def grid_positions(area: Area, spacing: float) -> np.ndarray:
    """Uniform lattice from the closest corner, ``floor(side/spacing) + 1`` points per axis."""
    if not spacing > 0:
        raise ConfigError("grid spacing must be positive")
    if spacing > area.side:
        raise ConfigError("grid spacing exceeds the side of the area")
    n = int(np.floor(area.side / spacing + 1e-9)) + 1
    ticks = np.arange(n) * spacing
    gx, gy = np.meshgrid(area.lower[0] + ticks, area.lower[1] + ticks, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _fingerprints(env, positions, representation):
    if representation not in REPRESENTATIONS:
        raise ConfigError(f"unknown representation {representation!r}")
    return REPRESENTATIONS[representation](synthesize_snapshots(env, positions))


def make_training_grid(env: Environment, spacing: float, representation: str = "transformed") -> LabeledDataset:
    pos = grid_positions(env.area, spacing)
    return LabeledDataset(
        _fingerprints(env, pos, representation),
        pos,
        representation,
        "training-grid",
        env.environment_id,
        float(spacing),
    )


def sample_positions(area: Area, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. uniform positions in ``area``."""
    if n < 1:
        raise ConfigError("test set needs at least one sample")
    return np.random.default_rng(seed).uniform(area.lower, area.upper, size=(n, 2))


def make_test_set(env: Environment, n: int, seed: int, representation: str = "transformed") -> LabeledDataset:
    pos = sample_positions(env.area, n, seed)
    return LabeledDataset(
        _fingerprints(env, pos, representation),
        pos,
        representation,
        "random-test",
        env.environment_id,
    )


def nrmse(estimates, labels, wavelength: float = 1.0) -> float:
    """Root-mean-square Euclidean position error divided by the wavelength."""
    t = np.asarray(estimates, dtype=float).reshape(-1, 2)
    x = np.asarray(labels, dtype=float).reshape(-1, 2)
    if len(t) != len(x) or len(x) == 0:
        raise ConfigError("estimates and labels must have the same nonzero length")
    return float(np.sqrt(np.mean(np.sum((x - t) ** 2, axis=1))) / wavelength)


def to_db(value: float) -> float:
    return float(20 * np.log10(value)) if value > 0 else float("-inf")


def reference_nrmse(area: Area | float, wavelength: float = 1.0) -> float:
    """NRMSE of the constant estimator at the area centroid (per-axis variance ``a^2/12``)."""
    if isinstance(area, Area):
        a, b = area.side, area.upper[1] - area.lower[1]
    else:
        a = b = float(area)
    return float(np.sqrt((a**2 + b**2) / 12) / wavelength)


@dataclass
class EvalReport:
    nrmse: float
    nrmse_db: float
    per_sample_errors: np.ndarray
    estimates: np.ndarray
    config_snapshot: dict
    wall_time: float


def evaluate(estimator, dataset: LabeledDataset, config_snapshot=None) -> EvalReport:
    start = time.perf_counter()
    est = estimator(dataset)
    elapsed = time.perf_counter() - start
    err = np.linalg.norm(dataset.positions - est, axis=1)
    value = nrmse(est, dataset.positions)
    return EvalReport(value, to_db(value), err, est, dict(config_snapshot or {}), elapsed)


def train_cnn(hyper: cnn.Hyperparams, train: LabeledDataset, callback=None) -> cnn.FitResult:
    model = cnn.init_model(hyper, train.input_shape)
    model.input_scale = cnn.fit_input_scale(train.tensors)
    return cnn.sgd_fit(model, train.tensors, train.positions, callback=callback)


@dataclass
class ExperimentRow:
    config: str
    L: int | str
    K: int | str
    representation: str
    spacing_lambda: float
    nrmse: float
    nrmse_db: float
    train_seconds: float
    estimates: np.ndarray | None = None
    error: str = ""

    def csv_row(self):
        return [
            self.config, self.L, self.K, self.representation,
            f"{self.spacing_lambda:.6g}", f"{self.nrmse:.6g}", f"{self.nrmse_db:.6g}",
            f"{self.train_seconds:.3f}",
        ]


def write_report(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def write_estimates(path, labels, estimates_by_config: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "index", "x", "y", "est_x", "est_y"])
        for name, est in estimates_by_config.items():
            for i, (x, t) in enumerate(zip(labels, est)):
                w.writerow([name, i, f"{x[0]:.6g}", f"{x[1]:.6g}", f"{t[0]:.6g}", f"{t[1]:.6g}"])


def _cnn_row(name, hyper, train, test, representation, spacing):
    start = time.perf_counter()
    try:
        fit = train_cnn(hyper, train)
    except TrainingDivergedError as exc:
        log.warning("%s: %s", name, exc)
        return ExperimentRow(name, hyper.num_cap_layers, hyper.kernels_per_layer, representation,
                             spacing, float("nan"), float("nan"), time.perf_counter() - start,
                             error=str(exc)), None
    seconds = time.perf_counter() - start
    est = cnn.predict(fit.model, test.tensors)
    value = nrmse(est, test.positions)
    row = ExperimentRow(name, hyper.num_cap_layers, hyper.kernels_per_layer, representation,
                        spacing, value, to_db(value), seconds, est)
    return row, fit


def run_accuracy_experiment(
    env: Environment,
    configs,
    base_hyper: cnn.Hyperparams,
    spacing: float = 0.25,
    n_test: int = 2000,
    test_seed: int = 1,
) -> list[ExperimentRow]:
    """Train one CNN per ``(L, K, representation)`` and score it on a shared test set.

    The returned rows end with a ``reference`` row for the constant estimator.
    """
    configs = list(configs)
    if not configs:
        return []
    rows, cache = [], {}
    for L, K, representation in configs:
        if representation not in cache:
            cache[representation] = (
                make_training_grid(env, spacing, representation),
                make_test_set(env, n_test, test_seed, representation),
            )
        train, test = cache[representation]
        require_same_environment(train, test)
        hyper = cnn.with_overrides(base_hyper, num_cap_layers=L, kernels_per_layer=K)
        name = f"cnn_L{L}_K{K}_{representation}"
        row, _ = _cnn_row(name, hyper, train, test, representation, spacing)
        rows.append(row)
    ref = reference_nrmse(env.area)
    rows.append(ExperimentRow("reference", "", "", "", spacing, ref, to_db(ref), 0.0))
    return rows


def _batches_per_epoch(n, batch_size):
    return -(-n // batch_size)


def matched_epochs(updates: int, n_train: int, batch_size: int) -> int:
    """Epochs needed on ``n_train`` samples to make at least ``updates`` SGD steps."""
    return -(-updates // _batches_per_epoch(n_train, batch_size))


def run_spacing_experiment(
    env: Environment,
    spacings,
    hyper: cnn.Hyperparams,
    n_test: int = 2000,
    test_seed: int = 1,
    representation: str = "transformed",
    match_updates: bool = True,
) -> list[ExperimentRow]:
    """CNN versus correlation baseline, one pair of rows per training-grid spacing.

    With ``match_updates`` the sparser grids train for more epochs so every
    CNN gets the number of SGD updates that ``hyper.epochs`` buys on the
    densest grid of the sweep.
    """
    spacings = [float(s) for s in spacings]
    if any(s <= 0 for s in spacings):
        raise ConfigError("spacings must be positive")
    if spacings != sorted(spacings):
        raise ConfigError("spacings must be ascending")
    test = make_test_set(env, n_test, test_seed, representation)
    test_snap = test.snapshots()
    rows = []
    updates = None
    for s in spacings:
        train = make_training_grid(env, s, representation)
        require_same_environment(train, test)
        if updates is None:
            updates = hyper.epochs * _batches_per_epoch(len(train), hyper.batch_size)
        h = hyper
        if match_updates:
            h = cnn.with_overrides(hyper, epochs=matched_epochs(updates, len(train), hyper.batch_size))
        row, _ = _cnn_row("cnn", h, train, test, representation, s)
        rows.append(row)
        start = time.perf_counter()
        db = FingerprintDatabase(train.snapshots(), train.positions, train.environment_id)
        est = classify(db, test_snap)
        value = nrmse(est, test.positions)
        rows.append(ExperimentRow("baseline", "", "", "snapshot", s, value, to_db(value),
                                  time.perf_counter() - start, est))
    return rows


__all__ = [
    "LabeledDataset",
    "EvalReport",
    "ExperimentRow",
    "evaluate",
    "grid_positions",
    "make_test_set",
    "make_training_grid",
    "matched_epochs",
    "nrmse",
    "reference_nrmse",
    "require_same_environment",
    "sample_positions",
    "run_accuracy_experiment",
    "run_spacing_experiment",
    "to_db",
    "train_cnn",
    "write_estimates",
    "write_report",
]
