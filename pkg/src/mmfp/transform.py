"""Angular-delay transform of channel snapshots and real-tensor packing.

The forward transform is ``F @ Y @ F^H`` with unitary DFT matrices on both
sides, so it is an isometry. Fingerprints are real ``(M, N_F, 2)`` tensors
holding the real and imaginary planes.
"""

import numpy as np


def dft_matrix(n: int) -> np.ndarray:
    """Unitary ``n``-point DFT matrix, ``F[a, m] = exp(-2j pi a m / n) / sqrt(n)``."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def pack(z) -> np.ndarray:
    """Stack real and imaginary parts into a trailing axis of size 2."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1).astype(float)


def unpack(t) -> np.ndarray:
    t = np.asarray(t)
    if t.shape[-1] != 2:
        raise ValueError(f"expected a trailing axis of size 2, got shape {t.shape}")
    return t[..., 0] + 1j * t[..., 1]


def _to_angular_delay(y):
    # Left F along antennas, right F^H along frequency; batched over leading axes.
    return np.fft.ifft(np.fft.fft(y, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def forward_transform(y) -> np.ndarray:
    """Angular-delay fingerprint of one snapshot, or of a stack ``(..., M, N_F)``."""
    return pack(_to_angular_delay(np.asarray(y, dtype=complex)))


def inverse_transform(fp) -> np.ndarray:
    """Snapshot from a fingerprint: ``F^H @ S @ F``."""
    s = unpack(fp)
    return np.fft.fft(np.fft.ifft(s, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def identity_passthrough(y) -> np.ndarray:
    """Pack an untransformed snapshot into the fingerprint layout."""
    return pack(np.asarray(y, dtype=complex))


REPRESENTATIONS = {
    "transformed": forward_transform,
    "raw": identity_passthrough,
}


def to_snapshot(fp, representation: str) -> np.ndarray:
    """Recover the complex snapshot behind a packed tensor of either representation."""
    if representation == "transformed":
        return inverse_transform(fp)
    if representation == "raw":
        return unpack(fp)
    raise ValueError(f"unknown representation {representation!r}")


def energy_support_fraction(z, level: float = 0.95) -> float:
    """Smallest fraction of entries that together hold ``level`` of the energy."""
    p = np.sort(np.abs(np.asarray(z)).ravel() ** 2)[::-1]
    total = p.sum()
    if total == 0:
        return 0.0
    k = int(np.searchsorted(np.cumsum(p), level * total)) + 1
    return min(k, p.size) / p.size
