"""Clustered multipath channel simulator.

A frozen, seeded environment holds clusters of specular scatterers, each
visible only from inside a circular visibility region (VR), plus an optional
line-of-sight path. ``synthesize_snapshot`` maps a terminal position to the
complex antenna x frequency response of a linear base-station array.

All lengths are in carrier wavelengths.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from mmfp.errors import ConfigError, FormatError

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0

ENV_MAGIC = b"MMENV1"
ENV_VERSION = 1


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array between ``first_antenna`` and ``last_antenna``."""

    num_antennas: int
    first_antenna: tuple[float, float]
    last_antenna: tuple[float, float]
    element_spacing: float = 0.5

    def __post_init__(self):
        if self.num_antennas < 1:
            raise ConfigError("array needs at least one antenna")
        span = np.hypot(*np.subtract(self.last_antenna, self.first_antenna))
        expected = (self.num_antennas - 1) * self.element_spacing
        if not np.isclose(span, expected, rtol=1e-9, atol=1e-9):
            raise ConfigError(
                f"array end points are {span:g} wavelengths apart, expected {expected:g}"
            )

    @classmethod
    def linear(cls, num_antennas, first_antenna, direction=(0.0, 1.0), element_spacing=0.5):
        """Build an array starting at ``first_antenna`` and growing along ``direction``."""
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
        first = np.asarray(first_antenna, dtype=float)
        last = first + (num_antennas - 1) * element_spacing * u
        return cls(
            int(num_antennas),
            (float(first[0]), float(first[1])),
            (float(last[0]), float(last[1])),
            float(element_spacing),
        )

    @property
    def axis(self) -> np.ndarray:
        if self.num_antennas == 1:
            return np.array([0.0, 1.0])
        d = np.subtract(self.last_antenna, self.first_antenna)
        return d / np.linalg.norm(d)

    def antenna_positions(self) -> np.ndarray:
        if self.num_antennas == 1:
            return np.array([self.first_antenna], dtype=float)
        t = np.arange(self.num_antennas) / (self.num_antennas - 1)
        first = np.asarray(self.first_antenna)
        return first + t[:, None] * (np.asarray(self.last_antenna) - first)

    def sine_of_arrival(self, sources) -> np.ndarray:
        """Sine of the arrival angle off broadside for plane waves from ``sources``."""
        rel = np.asarray(sources, dtype=float) - np.asarray(self.first_antenna)
        return rel @ self.axis / np.linalg.norm(rel, axis=-1)


@dataclass(frozen=True)
class RadioConfig:
    carrier_frequency: float = 300e6
    bandwidth: float = 20e6
    num_freq_points: int = 128

    def __post_init__(self):
        if self.num_freq_points < 2:
            raise ConfigError("need at least two frequency points")
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if not self.carrier_frequency > 0:
            raise ConfigError("carrier frequency must be positive")

    @property
    def wavelength(self) -> float:
        """Carrier wavelength in metres."""
        return SPEED_OF_LIGHT / self.carrier_frequency

    def frequency_offsets(self) -> np.ndarray:
        k = np.arange(self.num_freq_points)
        return -self.bandwidth / 2 + k * self.bandwidth / (self.num_freq_points - 1)


@dataclass(frozen=True)
class Area:
    """Axis-aligned square with closest corner ``lower`` and furthest ``upper``."""

    lower: tuple[float, float] = (-12.5, -12.5)
    upper: tuple[float, float] = (12.5, 12.5)

    def __post_init__(self):
        if not (self.lower[0] < self.upper[0] and self.lower[1] < self.upper[1]):
            raise ConfigError("area corners must satisfy lower < upper componentwise")

    @classmethod
    def centered(cls, side):
        h = side / 2
        return cls((-h, -h), (h, h))

    @property
    def side(self) -> float:
        return self.upper[0] - self.lower[0]

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lower) + np.asarray(self.upper)) / 2

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)


@dataclass(frozen=True, eq=False)
class Cluster:
    scatterer_positions: np.ndarray  # (n, 2)
    mpc_gains: np.ndarray  # (n,) complex
    vr_center: np.ndarray  # (2,)
    vr_radius: float

    def __post_init__(self):
        pos = np.asarray(self.scatterer_positions, dtype=float).reshape(-1, 2)
        gains = np.asarray(self.mpc_gains, dtype=complex).reshape(-1)
        if len(pos) < 1 or len(pos) != len(gains):
            raise ConfigError("cluster needs one gain per scatterer and at least one scatterer")
        if not self.vr_radius > 0:
            raise ConfigError("visibility radius must be positive")
        if not np.all(np.isfinite(gains)) or np.any(gains == 0):
            raise ConfigError("MPC gains must be finite and nonzero")
        object.__setattr__(self, "scatterer_positions", pos)
        object.__setattr__(self, "mpc_gains", gains)
        object.__setattr__(self, "vr_center", np.asarray(self.vr_center, dtype=float).reshape(2))
        object.__setattr__(self, "vr_radius", float(self.vr_radius))

    def visible_from(self, points) -> np.ndarray:
        d = np.linalg.norm(np.asarray(points, dtype=float) - self.vr_center, axis=-1)
        return d <= self.vr_radius


@dataclass(frozen=True)
class EnvironmentConfig:
    """Parameters of the random environment draw.

    Scatterer clusters are centred uniformly in an annulus around the area
    centre, MPCs spread around the cluster centre with a Gaussian of
    ``cluster_spread``. VR centres are uniform in the area. ``cluster_power``
    is the mean total MPC power of a cluster relative to the unit-amplitude
    LOS path, before path loss.
    """

    num_clusters: int = 10
    mpcs_per_cluster: int = 20
    vr_radius_range: tuple[float, float] = (10.0, 30.0)
    scatterer_radius_range: tuple[float, float] = (20.0, 60.0)
    cluster_spread: float = 2.0
    shadowing_std_db: float = 3.0
    cluster_power: float = 1.0
    los_enabled: bool = True
    path_loss_exponent: float = 2.0
    area: Area = field(default_factory=Area)
    array: ArrayGeometry = field(
        default_factory=lambda: ArrayGeometry.linear(128, (-200.0, -200.0))
    )
    radio: RadioConfig = field(default_factory=RadioConfig)

    def __post_init__(self):
        if self.num_clusters < 0:
            raise ConfigError("num_clusters must be >= 0")
        if self.num_clusters and self.mpcs_per_cluster < 1:
            raise ConfigError("mpcs_per_cluster must be >= 1")
        lo, hi = self.vr_radius_range
        if not 0 < lo <= hi:
            raise ConfigError("vr_radius_range must satisfy 0 < low <= high")
        lo, hi = self.scatterer_radius_range
        if not 0 <= lo <= hi:
            raise ConfigError("scatterer_radius_range must satisfy 0 <= low <= high")


@dataclass(frozen=True, eq=False)
class Environment:
    seed: int
    clusters: tuple[Cluster, ...]
    los_enabled: bool
    path_loss_exponent: float
    area: Area
    array: ArrayGeometry
    radio: RadioConfig

    @cached_property
    def _paths(self):
        # Flattened per-MPC table: scatterer, gain, VR centre, VR radius.
        if not self.clusters:
            return (np.zeros((0, 2)), np.zeros(0, complex), np.zeros((0, 2)), np.zeros(0))
        scat = np.concatenate([c.scatterer_positions for c in self.clusters])
        gains = np.concatenate([c.mpc_gains for c in self.clusters])
        n = [len(c.mpc_gains) for c in self.clusters]
        vrc = np.repeat(np.stack([c.vr_center for c in self.clusters]), n, axis=0)
        vrr = np.repeat([c.vr_radius for c in self.clusters], n)
        return scat, gains, vrc, vrr

    @property
    def num_paths(self) -> int:
        return len(self._paths[1]) + int(self.los_enabled)

    @property
    def shape(self) -> tuple[int, int]:
        return self.array.num_antennas, self.radio.num_freq_points

    def to_bytes(self) -> bytes:
        """Serialize to the versioned little-endian ``MMENV1`` layout."""
        a, r = self.array, self.radio
        out = [
            ENV_MAGIC,
            struct.pack(
                "<HQ?d4dI5d2dII",
                ENV_VERSION,
                self.seed & 0xFFFFFFFFFFFFFFFF,
                self.los_enabled,
                self.path_loss_exponent,
                *self.area.lower,
                *self.area.upper,
                a.num_antennas,
                *a.first_antenna,
                *a.last_antenna,
                a.element_spacing,
                r.carrier_frequency,
                r.bandwidth,
                r.num_freq_points,
                len(self.clusters),
            ),
        ]
        for c in self.clusters:
            out.append(struct.pack("<I3d", len(c.mpc_gains), *c.vr_center, c.vr_radius))
            out.append(c.scatterer_positions.astype("<f8").tobytes())
            gains = np.stack([c.mpc_gains.real, c.mpc_gains.imag], axis=-1)
            out.append(gains.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> Environment:
        if data[: len(ENV_MAGIC)] != ENV_MAGIC:
            raise FormatError("not an MMENV1 environment file")
        head = struct.Struct("<HQ?d4dI5d2dII")
        off = len(ENV_MAGIC)
        try:
            fields = head.unpack_from(data, off)
        except struct.error as exc:
            raise FormatError(f"truncated environment header: {exc}") from None
        off += head.size
        (version, seed, los, ple, l0, l1, u0, u1, m, f0, f1, e0, e1, spacing,
         fc, bw, nf, ncl) = fields
        if version != ENV_VERSION:
            raise FormatError(f"unsupported environment version {version}")
        clusters = []
        ch = struct.Struct("<I3d")
        try:
            for _ in range(ncl):
                n, cx, cy, rad = ch.unpack_from(data, off)
                off += ch.size
                pos = np.frombuffer(data, "<f8", 2 * n, off).reshape(n, 2)
                off += 16 * n
                g = np.frombuffer(data, "<f8", 2 * n, off).reshape(n, 2)
                off += 16 * n
                clusters.append(Cluster(pos.astype(float), g[:, 0] + 1j * g[:, 1], (cx, cy), rad))
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated environment body: {exc}") from None
        if off != len(data):
            raise FormatError("trailing bytes after environment body")
        return cls(
            seed=seed,
            clusters=tuple(clusters),
            los_enabled=bool(los),
            path_loss_exponent=ple,
            area=Area((l0, l1), (u0, u1)),
            array=ArrayGeometry(m, (f0, f1), (e0, e1), spacing),
            radio=RadioConfig(fc, bw, nf),
        )

    @cached_property
    def environment_id(self) -> bytes:
        """SHA-256 digest of the serialized environment."""
        return hashlib.sha256(self.to_bytes()).digest()

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Environment:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def build_environment(seed: int, config: EnvironmentConfig | None = None) -> Environment:
    """Draw a frozen environment; a pure function of ``(seed, config)``."""
    config = config or EnvironmentConfig()
    rng = np.random.default_rng(seed)
    area = config.area
    clusters = []
    for _ in range(config.num_clusters):
        r = rng.uniform(*config.scatterer_radius_range)
        phi = rng.uniform(0, 2 * np.pi)
        center = area.center + r * np.array([np.cos(phi), np.sin(phi)])
        n = config.mpcs_per_cluster
        scat = center + config.cluster_spread * rng.standard_normal((n, 2))
        shadow = 10 ** (config.shadowing_std_db * rng.standard_normal() / 20)
        scale = shadow * np.sqrt(config.cluster_power / (2 * n))
        gains = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * scale
        vr_center = rng.uniform(area.lower, area.upper)
        vr_radius = rng.uniform(*config.vr_radius_range)
        clusters.append(Cluster(scat, gains, vr_center, vr_radius))
    return Environment(
        seed=int(seed),
        clusters=tuple(clusters),
        los_enabled=config.los_enabled,
        path_loss_exponent=float(config.path_loss_exponent),
        area=area,
        array=config.array,
        radio=config.radio,
    )


def _chunk_response(env: Environment, x: np.ndarray) -> np.ndarray:
    scat, gains, vrc, vrr = env._paths
    b1 = np.asarray(env.array.first_antenna)
    ant = np.arange(env.array.num_antennas)
    freq_scale = 1.0 + env.radio.frequency_offsets() / env.radio.carrier_frequency
    half_ple = env.path_loss_exponent / 2

    lengths, sines, amps = [], [], []
    if env.los_enabled:
        d = np.linalg.norm(x - b1, axis=-1)
        lengths.append(d[:, None])
        sines.append(env.array.sine_of_arrival(x)[:, None])
        amps.append(d[:, None] ** -half_ple + 0j)
    if len(gains):
        leg = np.linalg.norm(scat - b1, axis=-1)
        d = np.linalg.norm(x[:, None, :] - scat[None], axis=-1) + leg
        visible = np.linalg.norm(x[:, None, :] - vrc[None], axis=-1) <= vrr
        lengths.append(d)
        sines.append(np.broadcast_to(env.array.sine_of_arrival(scat), d.shape))
        amps.append(gains * d ** -half_ple * visible)
    if not lengths:
        return np.zeros((len(x), *env.shape), dtype=complex)
    d = np.concatenate(lengths, axis=1)  # (n, P)
    s = np.concatenate(sines, axis=1)
    a = np.concatenate(amps, axis=1)
    steer = np.exp(2j * np.pi * env.array.element_spacing * ant[None, :, None] * s[:, None, :])
    delay = a[:, :, None] * np.exp(-2j * np.pi * d[:, :, None] * freq_scale)
    return steer @ delay


def synthesize_snapshots(env: Environment, positions, chunk: int = 64) -> np.ndarray:
    """Channel snapshots ``(n, M, N_F)`` for an ``(n, 2)`` array of positions."""
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    if x.shape[-1] != 2:
        raise ValueError("positions must have shape (n, 2)")
    outside = ~env.area.contains(x)
    if outside.any():
        log.warning("%d position(s) outside the area", int(outside.sum()))
    out = np.empty((len(x), *env.shape), dtype=complex)
    for i in range(0, len(x), chunk):
        out[i : i + chunk] = _chunk_response(env, x[i : i + chunk])
    return out


def synthesize_snapshot(env: Environment, x) -> np.ndarray:
    """Snapshot ``Y`` of shape ``(M, N_F)`` at position ``x``.

    ``Y[m, k] = sum_p a_p d_p**(-ple/2) exp(-2j pi (f_c + f_k) tau_p) exp(2j pi s m sin(phi_p))``
    over the LOS path and every MPC whose VR contains ``x``.
    """
    return synthesize_snapshots(env, np.reshape(x, (1, 2)))[0]
