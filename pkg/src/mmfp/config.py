"""Run configuration: nested sections, named profiles, YAML/JSON loading.

Every field has a default; loading a file overlays it on a profile and
rejects keys that do not exist. Lengths are in wavelengths.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from mmfp import cnn
from mmfp.channel import Area, ArrayGeometry, EnvironmentConfig, RadioConfig
from mmfp.errors import ConfigError


@dataclass
class EnvironmentSection:
    seed: int = 42
    num_clusters: int = 10
    mpcs_per_cluster: int = 20
    vr_radius_range: tuple[float, float] = (10.0, 30.0)
    scatterer_radius_range: tuple[float, float] = (20.0, 60.0)
    cluster_spread: float = 2.0
    shadowing_std_db: float = 3.0
    cluster_power: float = 1.0
    los_enabled: bool = True
    path_loss_exponent: float = 2.0
    area_side: float = 10.0
    num_antennas: int = 32
    array_first: tuple[float, float] = (-20.0, -20.0)
    array_direction: tuple[float, float] = (0.0, 1.0)
    element_spacing: float = 0.5
    carrier_hz: float = 300e6
    bandwidth_hz: float = 20e6
    num_subcarriers: int = 32

    def build(self) -> EnvironmentConfig:
        return EnvironmentConfig(
            num_clusters=self.num_clusters,
            mpcs_per_cluster=self.mpcs_per_cluster,
            vr_radius_range=tuple(self.vr_radius_range),
            scatterer_radius_range=tuple(self.scatterer_radius_range),
            cluster_spread=self.cluster_spread,
            shadowing_std_db=self.shadowing_std_db,
            cluster_power=self.cluster_power,
            los_enabled=self.los_enabled,
            path_loss_exponent=self.path_loss_exponent,
            area=Area.centered(self.area_side),
            array=ArrayGeometry.linear(
                self.num_antennas, tuple(self.array_first), tuple(self.array_direction), self.element_spacing
            ),
            radio=RadioConfig(self.carrier_hz, self.bandwidth_hz, self.num_subcarriers),
        )


@dataclass
class DatasetSection:
    grid_spacing: float = 0.25
    representation: str = "transformed"
    n_test: int = 2000
    test_seed: int = 1


@dataclass
class TrainingSection:
    num_cap_layers: int = 3
    kernels_per_layer: int = 16
    kernel_rows: int = 3
    kernel_cols: int = 5
    pool_rows: int = 2
    pool_cols: int = 2
    tikhonov: float = 1e-3
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 30
    rng_seed: int = 0

    def build(self) -> cnn.Hyperparams:
        return cnn.Hyperparams(**asdict(self))


@dataclass
class ExperimentSection:
    # (L, K, representation) triples for the accuracy sweep
    configs: list = field(
        default_factory=lambda: [[1, 16, "transformed"], [3, 16, "transformed"], [3, 16, "raw"]]
    )
    spacings: list = field(default_factory=lambda: [0.25, 1.0, 4.0])


@dataclass
class PathsSection:
    environment: str = "environment.mmenv"
    train: str = "train.mmds"
    test: str = "test.mmds"
    model: str = "model.mmcnn"


@dataclass
class RunConfig:
    profile: str = "desk"
    environment: EnvironmentSection = field(default_factory=EnvironmentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def environment_config(self) -> EnvironmentConfig:
        return self.environment.build()

    def hyperparams(self) -> cnn.Hyperparams:
        return self.training.build()


PROFILES = {
    "desk": {},
    # full-size array, band and area; same code paths, much longer runtime
    "paper": {
        "environment": {
            "area_side": 25.0,
            "num_antennas": 128,
            "num_subcarriers": 128,
            "array_first": [-200.0, -200.0],
        },
        "training": {"num_cap_layers": 4, "kernels_per_layer": 20, "epochs": 200, "learning_rate": 1e-3},
        "experiment": {"configs": [[1, 20, "transformed"], [4, 20, "transformed"], [4, 20, "raw"]]},
    },
}


def _overlay(obj, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where + key!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            _overlay(current, value, f"{where}{key}.")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"{where + key!r} needs {len(current)} values")
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)


def from_dict(data: dict | None = None, profile: str | None = None) -> RunConfig:
    """Defaults, then the named profile, then ``data``; validates the result."""
    data = copy.deepcopy(data or {})
    name = profile or data.pop("profile", None) or "desk"
    data.pop("profile", None)
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=name)
    _overlay(cfg, PROFILES[name], "")
    _overlay(cfg, data, "")
    validate(cfg)
    return cfg


def load_config(path=None, profile: str | None = None) -> RunConfig:
    if path is None:
        return from_dict({}, profile)
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(data or {}, profile)


def validate(cfg: RunConfig):
    # building the library objects runs their own checks
    cfg.environment_config()
    cfg.hyperparams()
    if cfg.dataset.representation not in ("transformed", "raw"):
        raise ConfigError(f"unknown representation {cfg.dataset.representation!r}")
    if not cfg.dataset.grid_spacing > 0 or cfg.dataset.n_test < 1:
        raise ConfigError("grid_spacing must be positive and n_test >= 1")
    for entry in cfg.experiment.configs:
        if len(entry) != 3 or entry[2] not in ("transformed", "raw"):
            raise ConfigError(f"experiment config {entry!r} is not [L, K, representation]")
