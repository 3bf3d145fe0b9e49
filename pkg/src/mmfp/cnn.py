"""Real-valued CNN position regressor with hand-written backpropagation.

The network is ``L`` CAP blocks (same-padded convolution, ReLU, non-overlapping
max-pool) followed by a fully-connected layer producing a 2-D position.
Tensors are channels-last: a batch of inputs has shape ``(N, R, C, D)``.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mmfp.errors import ConfigError, FormatError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MMCNN1"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    num_cap_layers: int = 3
    kernels_per_layer: int = 16
    kernel_rows: int = 3
    kernel_cols: int = 5
    pool_rows: int = 2
    pool_cols: int = 2
    tikhonov: float = 1e-3
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_cap_layers < 0:
            raise ConfigError("num_cap_layers must be >= 0")
        if self.num_cap_layers and self.kernels_per_layer < 1:
            raise ConfigError("kernels_per_layer must be >= 1")
        if min(self.kernel_rows, self.kernel_cols, self.pool_rows, self.pool_cols) < 1:
            raise ConfigError("kernel and pool sizes must be >= 1")
        if self.tikhonov < 0:
            raise ConfigError("tikhonov must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def feature_shape(hyper: Hyperparams, input_shape) -> tuple[int, int, int]:
    """Shape of ``H^L`` for a given input shape; validates pooling divisibility."""
    r, c, d = input_shape
    for layer in range(hyper.num_cap_layers):
        if r % hyper.pool_rows or c % hyper.pool_cols:
            raise ShapeError(
                f"layer {layer + 1} input {r}x{c} not divisible by pool "
                f"{hyper.pool_rows}x{hyper.pool_cols}"
            )
        r, c, d = r // hyper.pool_rows, c // hyper.pool_cols, hyper.kernels_per_layer
    return r, c, d


@dataclass(eq=False)
class CnnModel:
    hyper: Hyperparams
    input_shape: tuple[int, int, int]
    kernels: list[np.ndarray]  # per layer, (K, S1, S2, S3)
    biases: list[np.ndarray]  # per layer, (K,)
    fc_weights: np.ndarray  # (2, F)
    fc_bias: np.ndarray  # (2,)
    input_scale: float = 1.0
    provenance: dict = field(default_factory=dict)

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self._blocks())

    def _blocks(self):
        # Stacking order of theta: all kernels, FC weights, conv biases, FC bias.
        return [*self.kernels, self.fc_weights, *self.biases, self.fc_bias]

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._blocks()])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {theta.shape}")
        off = 0
        for a in self._blocks():
            a[...] = theta[off : off + a.size].reshape(a.shape)
            off += a.size

    def copy(self) -> CnnModel:
        return copy.deepcopy(self)


def init_model(hyper: Hyperparams, input_shape, seed: int | None = None) -> CnnModel:
    """Gaussian weights with std ``1/sqrt(fan_in)`` and zero biases."""
    rng = np.random.default_rng(hyper.rng_seed if seed is None else seed)
    input_shape = tuple(int(v) for v in input_shape)
    feat = feature_shape(hyper, input_shape)
    kernels, biases = [], []
    depth = input_shape[2]
    for _ in range(hyper.num_cap_layers):
        shape = (hyper.kernels_per_layer, hyper.kernel_rows, hyper.kernel_cols, depth)
        fan_in = hyper.kernel_rows * hyper.kernel_cols * depth
        kernels.append(rng.standard_normal(shape) / np.sqrt(fan_in))
        biases.append(np.zeros(hyper.kernels_per_layer))
        depth = hyper.kernels_per_layer
    n_feat = int(np.prod(feat))
    fc = rng.standard_normal((2, n_feat)) / np.sqrt(n_feat)
    return CnnModel(hyper, input_shape, kernels, biases, fc, np.zeros(2))


def zero_model(hyper: Hyperparams, input_shape) -> CnnModel:
    m = init_model(hyper, input_shape, seed=0)
    m.set_params(np.zeros(m.num_params))
    return m


# -- layers -----------------------------------------------------------------


def _same_pads(s1, s2):
    top, left = (s1 - 1) // 2, (s2 - 1) // 2
    return (top, s1 - 1 - top), (left, s2 - 1 - left)


def _im2col(x, s1, s2, pads=None):
    # (N, R, C, D) -> (N*R*C, S1*S2*D), columns ordered (u, v, d).
    n, r, c, d = x.shape
    rows, cols = pads or _same_pads(s1, s2)
    xp = np.pad(x, ((0, 0), rows, cols, (0, 0)))
    win = sliding_window_view(xp, (s1, s2), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * r * c, s1 * s2 * d)


def _kernel_matrix(kernels):
    return kernels.reshape(len(kernels), -1).T


def conv_layer(x, kernels, biases):
    """Same-padded correlation: ``out[r, c, j] = b_j + sum(w_j * pad(x)[r:r+S1, c:c+S2, :])``.

    Accepts a single ``(R, C, D)`` tensor or a batch ``(N, R, C, D)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 3
    if single:
        x = x[None]
    kernels = np.asarray(kernels, dtype=float)
    if kernels.ndim != 4 or kernels.shape[3] != x.shape[3]:
        raise ShapeError(f"kernel depth {kernels.shape[-1]} does not match input depth {x.shape[3]}")
    n, r, c, _ = x.shape
    k, s1, s2, _ = kernels.shape
    out = _im2col(x, s1, s2) @ _kernel_matrix(kernels) + np.asarray(biases, dtype=float)
    out = out.reshape(n, r, c, k)
    return out[0] if single else out


def relu(z):
    return np.maximum(z, 0.0)


def _pool_windows(g, n1, n2):
    n, r, c, k = g.shape
    w = g.reshape(n, r // n1, n1, c // n2, n2, k).transpose(0, 1, 3, 5, 2, 4)
    return w.reshape(n, r // n1, c // n2, k, n1 * n2)


def max_pool(g, n1: int, n2: int):
    """Non-overlapping ``n1 x n2`` window maximum, channel by channel."""
    g = np.asarray(g, dtype=float)
    single = g.ndim == 3
    if single:
        g = g[None]
    if g.shape[1] % n1 or g.shape[2] % n2:
        raise ShapeError(f"input {g.shape[1]}x{g.shape[2]} not divisible by pool {n1}x{n2}")
    out = _pool_windows(g, n1, n2).max(axis=-1)
    return out[0] if single else out


# -- network ----------------------------------------------------------------


def _check_input(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match model {model.input_shape}")
    return x, single


def _forward_cached(model: CnnModel, x):
    h = x / model.input_scale
    hp = model.hyper
    caches = []
    for w, b in zip(model.kernels, model.biases):
        n, r, c, _ = h.shape
        cols = _im2col(h, hp.kernel_rows, hp.kernel_cols)
        z = (cols @ _kernel_matrix(w) + b).reshape(n, r, c, -1)
        g = relu(z)
        win = _pool_windows(g, hp.pool_rows, hp.pool_cols)
        arg = win.argmax(axis=-1)
        h = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        caches.append((cols, z, arg, (n, r, c, h.shape[3], w.shape[3])))
    flat = h.reshape(len(h), -1)
    t = flat @ model.fc_weights.T + model.fc_bias
    return t, flat, caches


def _forward_lean(model: CnnModel, x):
    # Inference only: ReLU commutes with max-pooling, so it runs on the pooled
    # map, and pooling reduces over window axes without a transposed copy.
    h = x / model.input_scale
    hp = model.hyper
    n1, n2 = hp.pool_rows, hp.pool_cols
    for w, b in zip(model.kernels, model.biases):
        n, r, c, _ = h.shape
        z = _im2col(h, hp.kernel_rows, hp.kernel_cols) @ _kernel_matrix(w)
        z += b
        h = z.reshape(n, r // n1, n1, c // n2, n2, -1).max(axis=(2, 4))
        np.maximum(h, 0.0, out=h)
    return h.reshape(len(h), -1) @ model.fc_weights.T + model.fc_bias


def forward(model: CnnModel, x) -> np.ndarray:
    """Position estimate ``W vec(H^L) + b`` for one fingerprint or a batch."""
    x, single = _check_input(model, x)
    t = _forward_lean(model, x)
    return t[0] if single else t


def predict(model: CnnModel, x, chunk: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([forward(model, x[i : i + chunk]) for i in range(0, len(x), chunk)])


def _check_batch(x, positions):
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(positions) == 0:
        raise ConfigError("batch must not be empty")
    if np.ndim(x) != 4 or len(x) != len(positions):
        raise ShapeError("inputs must be (N, R, C, D) with one position per input")
    return positions


def loss(model: CnnModel, x, positions) -> float:
    """``beta/2 |theta|^2 + mean_i |x_i - t_i|^2``."""
    positions = _check_batch(x, positions)
    x, _ = _check_input(model, x)
    theta = model.get_params()
    resid = positions - _forward_cached(model, x)[0]
    return float(model.hyper.tikhonov / 2 * theta @ theta + np.mean(np.sum(resid**2, axis=1)))


def loss_and_gradient(model: CnnModel, x, positions) -> tuple[float, np.ndarray]:
    positions = _check_batch(x, positions)
    x, _ = _check_input(model, x)
    hp = model.hyper
    n_batch = len(x)
    t, flat, caches = _forward_cached(model, x)
    resid = positions - t
    theta = model.get_params()
    value = hp.tikhonov / 2 * theta @ theta + np.mean(np.sum(resid**2, axis=1))

    dt = -2.0 * resid / n_batch
    g_fc_w = dt.T @ flat
    g_fc_b = dt.sum(axis=0)
    dh = (dt @ model.fc_weights).reshape(n_batch, *feature_shape(hp, model.input_shape))

    g_kernels = [None] * len(caches)
    g_biases = [None] * len(caches)
    for layer in reversed(range(len(caches))):
        cols, z, arg, (n, r, c, k, d) = caches[layer]
        s1, s2 = hp.kernel_rows, hp.kernel_cols
        n1, n2 = hp.pool_rows, hp.pool_cols
        # route pooled gradient to the selected window element
        dwin = np.zeros((n, r // n1, c // n2, k, n1 * n2))
        np.put_along_axis(dwin, arg[..., None], dh[..., None], axis=-1)
        dg = dwin.reshape(n, r // n1, c // n2, k, n1, n2).transpose(0, 1, 4, 2, 5, 3)
        dz = dg.reshape(n, r, c, k) * (z > 0)
        dz_flat = dz.reshape(-1, k)
        gw = cols.T @ dz_flat
        g_kernels[layer] = gw.T.reshape(k, s1, s2, d)
        g_biases[layer] = dz_flat.sum(axis=0)
        if layer == 0:
            break
        # input gradient = correlation of dz with the flipped kernels
        (top, bottom), (left, right) = _same_pads(s1, s2)
        flipped = model.kernels[layer][:, ::-1, ::-1, :].transpose(1, 2, 0, 3).reshape(-1, d)
        dh = (_im2col(dz, s1, s2, ((bottom, top), (right, left))) @ flipped).reshape(n, r, c, d)

    grad = np.concatenate(
        [g.ravel() for g in g_kernels]
        + [g_fc_w.ravel()]
        + [g.ravel() for g in g_biases]
        + [g_fc_b]
    )
    grad += hp.tikhonov * theta
    return float(value), grad


def backward(model: CnnModel, x, positions) -> np.ndarray:
    """Analytic gradient of :func:`loss` with respect to the stacked parameters."""
    return loss_and_gradient(model, x, positions)[1]


# -- training ---------------------------------------------------------------


@dataclass
class FitResult:
    model: CnnModel
    initial_loss: float
    losses: list[float]  # full-training-set J after each epoch
    learning_rates: list[float]


def fit_input_scale(x) -> float:
    """RMS magnitude of the complex entries behind a stack of packed tensors."""
    x = np.asarray(x, dtype=float)
    rms = float(np.sqrt(np.mean(np.sum(x**2, axis=-1))))
    return rms if rms > 0 else 1.0


def full_loss(model, x, positions, chunk: int = 512) -> float:
    theta = model.get_params()
    sq = 0.0
    for i in range(0, len(x), chunk):
        resid = positions[i : i + chunk] - forward(model, x[i : i + chunk])
        sq += float(np.sum(resid**2))
    return model.hyper.tikhonov / 2 * float(theta @ theta) + sq / len(x)


def sgd_fit(
    model: CnnModel,
    x,
    positions,
    *,
    learning_rate: float | None = None,
    batch_size: int | None = None,
    epochs: int | None = None,
    seed: int | None = None,
    callback=None,
) -> FitResult:
    """Mini-batch SGD on a copy of ``model``.

    The learning rate is halved whenever the epoch-end training loss rises.
    Raises :class:`TrainingDivergedError` if the loss becomes non-finite.
    """
    hp = model.hyper
    lr = hp.learning_rate if learning_rate is None else learning_rate
    batch_size = batch_size or hp.batch_size
    epochs = hp.epochs if epochs is None else epochs
    rng = np.random.default_rng(hp.rng_seed if seed is None else seed)

    x = np.asarray(x, dtype=float)
    positions = _check_batch(x, positions)
    model = model.copy()
    theta = model.get_params()
    prev = full_loss(model, x, positions)
    initial = prev
    losses, rates = [], []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        # overflow on a diverging run shows up as a non-finite loss below
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(0, len(x), batch_size):
                idx = order[i : i + batch_size]
                _, grad = loss_and_gradient(model, x[idx], positions[idx])
                theta -= lr * grad
                model.set_params(theta)
            current = full_loss(model, x, positions)
        if not np.isfinite(current):
            raise TrainingDivergedError(epoch, lr, current)
        losses.append(current)
        rates.append(lr)
        if callback is not None:
            callback(epoch, current, lr)
        log.debug("epoch %d loss %.6g lr %.3g", epoch, current, lr)
        if current > prev:
            lr /= 2
        prev = current
    return FitResult(model, initial, losses, rates)


# -- sizing -----------------------------------------------------------------


def _odd_ceil(v: float) -> int:
    n = max(1, int(np.ceil(v - 1e-9)))
    return n if n % 2 else n + 1


def kernel_bins_from_physics(radio, array, angular_deg: float, delay_us: float) -> tuple[int, int]:
    """Kernel size in DFT bins spanning an angular extent and a delay extent.

    Sine-angle bins are ``2/M`` wide and delay bins ``1/W``; sizes are rounded
    up to odd integers so same-padding stays centred.
    """
    if not 0 < angular_deg < 90:
        raise ConfigError("angular extent must be in (0, 90) degrees")
    if not delay_us > 0:
        raise ConfigError("delay extent must be positive")
    rows = array.num_antennas * np.sin(np.deg2rad(angular_deg)) / 2
    cols = delay_us * 1e-6 * radio.bandwidth
    return _odd_ceil(rows), _odd_ceil(cols)


def count_forward_flops(hyper: Hyperparams, input_shape) -> int:
    """Multiply-adds (x2), bias adds, ReLU and pooling comparisons of one forward pass."""
    r, c, d = input_shape
    flops = 0
    k = hyper.kernels_per_layer
    for _ in range(hyper.num_cap_layers):
        flops += 2 * r * c * k * hyper.kernel_rows * hyper.kernel_cols * d
        flops += 3 * r * c * k
        r, c, d = r // hyper.pool_rows, c // hyper.pool_cols, k
    return flops + 2 * 2 * r * c * d + 2


# -- persistence ------------------------------------------------------------

_HEAD = struct.Struct("<H3I6I2d2IQd")


def model_to_bytes(model: CnnModel) -> bytes:
    hp = model.hyper
    head = _HEAD.pack(
        MODEL_VERSION,
        *model.input_shape,
        hp.num_cap_layers,
        hp.kernels_per_layer,
        hp.kernel_rows,
        hp.kernel_cols,
        hp.pool_rows,
        hp.pool_cols,
        hp.tikhonov,
        hp.learning_rate,
        hp.batch_size,
        hp.epochs,
        hp.rng_seed & 0xFFFFFFFFFFFFFFFF,
        model.input_scale,
    )
    theta = model.get_params().astype("<f8")
    meta = json.dumps(model.provenance, sort_keys=True).encode()
    return b"".join(
        [MODEL_MAGIC, head, struct.pack("<Q", theta.size), theta.tobytes(), struct.pack("<I", len(meta)), meta]
    )


def model_from_bytes(data: bytes) -> CnnModel:
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("not an MMCNN1 model file")
    off = len(MODEL_MAGIC)
    try:
        v, r, c, d, nl, k, s1, s2, n1, n2, beta, lr, bs, ep, seed, scale = _HEAD.unpack_from(data, off)
        off += _HEAD.size
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        theta = np.frombuffer(data, "<f8", n, off).astype(float)
        off += 8 * n
        (m,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off : off + m].decode()) if m else {}
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt model file: {exc}") from None
    if v != MODEL_VERSION:
        raise FormatError(f"unsupported model version {v}")
    hyper = Hyperparams(nl, k, s1, s2, n1, n2, beta, lr, bs, ep, seed)
    model = init_model(hyper, (r, c, d), seed=0)
    model.set_params(theta)
    model.input_scale = scale
    model.provenance = meta
    return model


def save_model(model: CnnModel, path):
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> CnnModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def hyper_dict(hyper: Hyperparams) -> dict:
    return asdict(hyper)


def with_overrides(hyper: Hyperparams, **kw) -> Hyperparams:
    return replace(hyper, **kw)
