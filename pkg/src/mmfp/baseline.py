"""Correlation-based nearest-fingerprint classifier.

Picks the stored position whose snapshot has the largest normalized
correlation ``|<Y_i, Y_new>| / (|Y_i| |Y_new|)`` with the query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmfp.errors import ConfigError, CorrelationError, ShapeError


def correlate(y_ref, y_new) -> float:
    """Normalized correlation ``|Tr(Y_ref^H Y_new)| / sqrt(Tr(Y_ref^H Y_ref) Tr(Y_new^H Y_new))``."""
    a = np.asarray(y_ref, dtype=complex)
    b = np.asarray(y_new, dtype=complex)
    if a.shape != b.shape:
        raise ShapeError(f"snapshot shapes differ: {a.shape} vs {b.shape}")
    ea = np.vdot(a, a).real
    eb = np.vdot(b, b).real
    if ea == 0 or eb == 0:
        raise CorrelationError("correlation undefined for an all-zero snapshot")
    return float(min(abs(np.vdot(a, b)) / np.sqrt(ea * eb), 1.0))


@dataclass(frozen=True, eq=False)
class FingerprintDatabase:
    snapshots: np.ndarray  # (N, M, N_F) complex
    positions: np.ndarray  # (N, 2)
    environment_id: bytes = b""

    def __post_init__(self):
        y = np.asarray(self.snapshots, dtype=complex)
        x = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(y) == 0:
            raise ConfigError("fingerprint database must not be empty")
        if y.ndim != 3 or len(y) != len(x):
            raise ShapeError("need one (M, N_F) snapshot per position")
        if len(np.unique(x, axis=0)) != len(x):
            raise ConfigError("database positions must be unique")
        norms = np.sqrt(np.sum(np.abs(y) ** 2, axis=(1, 2)))
        if np.any(norms == 0):
            raise CorrelationError("database holds an all-zero snapshot")
        object.__setattr__(self, "snapshots", y)
        object.__setattr__(self, "positions", x)
        # unit-norm rows, flattened, for one matrix product per query batch
        object.__setattr__(self, "_unit", (y / norms[:, None, None]).reshape(len(y), -1))

    def __len__(self):
        return len(self.positions)

    def correlations(self, y_new) -> np.ndarray:
        """Correlation of each stored snapshot with each query, shape ``(n_query, N)``."""
        q = np.asarray(y_new, dtype=complex)
        single = q.ndim == 2
        q = q.reshape(-1, *self.snapshots.shape[1:]) if not single else q[None]
        if q.shape[1:] != self.snapshots.shape[1:]:
            raise ShapeError(f"query shape {q.shape[1:]} does not match database")
        qn = np.sqrt(np.sum(np.abs(q) ** 2, axis=(1, 2)))
        if np.any(qn == 0):
            raise CorrelationError("correlation undefined for an all-zero snapshot")
        flat = q.reshape(len(q), -1) / qn[:, None]
        return np.minimum(np.abs(flat @ self._unit.conj().T), 1.0)

    def classify(self, y_new) -> np.ndarray:
        return classify(self, y_new)


def classify(db: FingerprintDatabase, y_new, chunk: int = 256) -> np.ndarray:
    """Position of the best-correlated stored snapshot; lowest index wins ties.

    ``y_new`` may be one ``(M, N_F)`` snapshot or a stack of them.
    """
    q = np.asarray(y_new, dtype=complex)
    if q.ndim == 2:
        return db.positions[int(np.argmax(db.correlations(q)[0]))].copy()
    idx = np.concatenate(
        [np.argmax(db.correlations(q[i : i + chunk]), axis=1) for i in range(0, len(q), chunk)]
    )
    return db.positions[idx].copy()
