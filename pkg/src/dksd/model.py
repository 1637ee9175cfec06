"""Two-branch sequence autoencoder over log-mel spectrograms.

A dynamics encoder and an instance-normalized content encoder map a
T x n_mels spectrogram to two T x k latent sequences; the decoder
reconstructs the input from their concatenation. All layers are built
on the in-house autodiff tensors so the linear-dynamics losses can
backpropagate through the whole stack.

Layer vocabulary:
  * unidirectional single-layer LSTMs (gate order i, f, g, o; one bias
    vector per layer, forget-gate bias initialized to +1),
  * residual blocks out = skip(x) + tanh(x @ W + b), with a learned
    bias-free linear projection on the skip path when the width changes,
  * instance normalization: per-time z-scoring across the feature axis,
    population variance, no learned affine parameters.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

# Reported size of the original full-scale architecture this follows.
# The residual-block internals there are under-specified, so the count
# achieved here may differ; build_model logs the comparison (see README).
REFERENCE_PARAM_COUNT = 3_500_000

CHECKPOINT_MAGIC = b"DKSDCKPT"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Model/width configuration is internally inconsistent."""


def _tuple_of_ints(value, field):
    try:
        out = tuple(int(v) for v in value)
    except TypeError:
        raise ConfigurationError(f"{field} must be a sequence of ints") from None
    if not out or any(v <= 0 for v in out):
        raise ConfigurationError(f"{field} must be non-empty positive ints, got {out}")
    return out


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Widths and loss hyperparameters of the two-branch autoencoder.

    Residual width tuples list the output width of each block; the input
    width of a block is the preceding layer's output.
    """

    n_mels: int = 80
    k: int = 64
    dynamics_lstm_widths: tuple = (256, 128)
    dynamics_residual_widths: tuple = (128, 128, 64, 64, 64, 64, 64)
    content_lstm_widths: tuple = (256, 128, 128, 64)
    content_residual_widths: tuple = (64, 64)
    decoder_residual_widths: tuple = (64, 64, 128)
    decoder_lstm_widths: tuple = (128,)
    m_steps: int = 5
    ridge_lambda: float = 1e-3
    w_rec: float = 1.0
    w_pred: float = 0.1
    w_eigen: float = 5.0
    epsilon_in: float = 1e-5

    def __post_init__(self):
        for field in (
            "dynamics_lstm_widths",
            "dynamics_residual_widths",
            "content_lstm_widths",
            "content_residual_widths",
            "decoder_residual_widths",
            "decoder_lstm_widths",
        ):
            object.__setattr__(
                self, field, _tuple_of_ints(getattr(self, field), field)
            )
        if self.n_mels < 2:
            raise ConfigurationError(f"n_mels must be >= 2, got {self.n_mels}")
        if self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")
        if self.dynamics_residual_widths[-1] != self.k:
            raise ConfigurationError(
                f"last dynamics residual width "
                f"{self.dynamics_residual_widths[-1]} must equal k={self.k}"
            )
        if self.content_residual_widths[-1] != self.k:
            raise ConfigurationError(
                f"last content residual width "
                f"{self.content_residual_widths[-1]} must equal k={self.k}"
            )
        if self.m_steps < 1:
            raise ConfigurationError(f"m_steps must be >= 1, got {self.m_steps}")
        if self.ridge_lambda < 0:
            raise ConfigurationError("ridge_lambda must be nonnegative")
        if min(self.w_rec, self.w_pred, self.w_eigen) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.epsilon_in <= 0:
            raise ConfigurationError("epsilon_in must be positive")

    @property
    def decoder_input_width(self):
        return 2 * self.k

    def to_dict(self):
        out = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, mapping):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**mapping)


class ModelParameters:
    """Named table of trainable tensors, in deterministic creation order."""

    def __init__(self, table):
        self._table = dict(table)

    def __getitem__(self, name):
        return self._table[name]

    def __contains__(self, name):
        return name in self._table

    def __len__(self):
        return len(self._table)

    def get(self, name, default=None):
        return self._table.get(name, default)

    def names(self):
        return list(self._table)

    def items(self):
        return self._table.items()

    def tensors(self):
        return list(self._table.values())

    def total_count(self):
        return sum(t.data.size for t in self._table.values())

    def zero_grad(self):
        for t in self._table.values():
            t.zero_grad()

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self._table.values())

    def copy_values(self):
        """Snapshot of parameter arrays (detached copies)."""
        return {name: t.data.copy() for name, t in self._table.items()}

    def load_values(self, mapping):
        missing = set(self._table) - set(mapping)
        extra = set(mapping) - set(self._table)
        if missing or extra:
            raise ValueError(
                f"parameter table mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, tensor in self._table.items():
            arr = np.asarray(mapping[name])
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: "
                    f"{arr.shape} vs {tensor.data.shape}"
                )
            tensor.data = arr.astype(tensor.data.dtype, copy=True)


def is_bias_name(name):
    """Bias parameters (decay-exempt) are the table entries named '*.b'."""
    return name.rsplit(".", 1)[-1] == "b"


# -- initialization -----------------------------------------------------------


def _uniform_init(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _make_lstm(table, rng, prefix, d_in, hidden, dtype):
    table[f"{prefix}.w_x"] = Tensor(
        _uniform_init(rng, d_in, (d_in, 4 * hidden), dtype), requires_grad=True
    )
    table[f"{prefix}.w_h"] = Tensor(
        _uniform_init(rng, hidden, (hidden, 4 * hidden), dtype), requires_grad=True
    )
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
    table[f"{prefix}.b"] = Tensor(bias, requires_grad=True)


def _make_residual(table, rng, prefix, d_in, d_out, dtype):
    table[f"{prefix}.w"] = Tensor(
        _uniform_init(rng, d_in, (d_in, d_out), dtype), requires_grad=True
    )
    table[f"{prefix}.b"] = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    if d_in != d_out:
        table[f"{prefix}.w_skip"] = Tensor(
            _uniform_init(rng, d_in, (d_in, d_out), dtype), requires_grad=True
        )


def build_model(config, seed, dtype=np.float32):
    """Initialize all parameters; returns (ModelParameters, parameter count).

    Weight matrices draw from U[-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases
    start at zero except LSTM forget gates (+1). The total scalar count is
    logged next to the published reference size.
    """
    rng = np.random.default_rng(seed)
    table = {}

    width = config.n_mels
    for i, hidden in enumerate(config.dynamics_lstm_widths):
        _make_lstm(table, rng, f"dynamics.lstm{i}", width, hidden, dtype)
        width = hidden
    for i, out in enumerate(config.dynamics_residual_widths):
        _make_residual(table, rng, f"dynamics.residual{i}", width, out, dtype)
        width = out

    width = config.n_mels
    for i, hidden in enumerate(config.content_lstm_widths):
        _make_lstm(table, rng, f"content.lstm{i}", width, hidden, dtype)
        width = hidden
    for i, out in enumerate(config.content_residual_widths):
        _make_residual(table, rng, f"content.residual{i}", width, out, dtype)
        width = out

    width = config.decoder_input_width
    for i, out in enumerate(config.decoder_residual_widths):
        _make_residual(table, rng, f"decoder.residual{i}", width, out, dtype)
        width = out
    for i, hidden in enumerate(config.decoder_lstm_widths):
        _make_lstm(table, rng, f"decoder.lstm{i}", width, hidden, dtype)
        width = hidden
    table["decoder.out.w"] = Tensor(
        _uniform_init(rng, width, (width, config.n_mels), dtype), requires_grad=True
    )
    table["decoder.out.b"] = Tensor(
        np.zeros(config.n_mels, dtype=dtype), requires_grad=True
    )

    params = ModelParameters(table)
    count = params.total_count()
    logger.info(
        "built model: %d parameters (reference architecture reports %d; "
        "difference %+d is documented, not asserted)",
        count,
        REFERENCE_PARAM_COUNT,
        count - REFERENCE_PARAM_COUNT,
    )
    return params, count


def parameter_count_formula(config):
    """Closed-form count matching build_model's table, for cross-checks."""

    def lstm(d_in, hidden):
        return d_in * 4 * hidden + hidden * 4 * hidden + 4 * hidden

    def residual(d_in, d_out):
        return d_in * d_out + d_out + (d_in * d_out if d_in != d_out else 0)

    def chain(start, lstm_widths, residual_widths):
        total, width = 0, start
        for hidden in lstm_widths:
            total += lstm(width, hidden)
            width = hidden
        for out in residual_widths:
            total += residual(width, out)
            width = out
        return total, width

    total = 0
    total += chain(
        config.n_mels, config.dynamics_lstm_widths, config.dynamics_residual_widths
    )[0]
    total += chain(
        config.n_mels, config.content_lstm_widths, config.content_residual_widths
    )[0]
    dec, width = chain(
        config.decoder_input_width,
        [],
        config.decoder_residual_widths,
    )
    total += dec
    for hidden in config.decoder_lstm_widths:
        total += lstm(width, hidden)
        width = hidden
    total += width * config.n_mels + config.n_mels
    return total


# -- layer forward passes -----------------------------------------------------


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _ensure_batch(x):
    """Lift T x F input to a batch of one; remember to squeeze on the way out."""
    if x.ndim == 2:
        t, f = x.shape
        return x.reshape((1, t, f)), True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected a T x F matrix or B x T x F batch, got {x.shape}")


def _time_matmul(x, w):
    """Apply a feature-axis linear map to (B, T, d) input."""
    b, t, d = x.shape
    return (x.reshape((b * t, d)) @ w).reshape((b, t, w.shape[1]))


def lstm_forward(x, w_x, w_h, b):
    """Single-layer unidirectional LSTM over a (B, T, F) batch -> (B, T, H)."""
    bsz, t_len, _ = x.shape
    hidden = w_h.shape[0]
    xw = _time_matmul(x, w_x)  # one big input projection for all steps
    h = Tensor(np.zeros((bsz, hidden), dtype=x.data.dtype))
    c = Tensor(np.zeros((bsz, hidden), dtype=x.data.dtype))
    cols = slice(None)
    outputs = []
    for t in range(t_len):
        z = xw[(cols, t)] + h @ w_h + b
        i = ad.sigmoid(z[(cols, slice(0, hidden))])
        f = ad.sigmoid(z[(cols, slice(hidden, 2 * hidden))])
        g = ad.tanh(z[(cols, slice(2 * hidden, 3 * hidden))])
        o = ad.sigmoid(z[(cols, slice(3 * hidden, 4 * hidden))])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outputs.append(h)
    return ad.stack(outputs, axis=1)


def instance_normalize(z, epsilon=1e-5):
    """Per-time z-score across the feature (last) axis.

    Population variance, epsilon inside the square root, no learned affine
    parameters; removes per-time additive offsets and (up to epsilon
    effects) positive scalings.
    """
    z = _as_tensor(z)
    if z.shape[-1] < 2:
        raise ValueError(f"need at least 2 features to normalize, got {z.shape}")
    mu = z.mean(axis=-1, keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + epsilon)


def residual_block(x, w, b, w_skip=None):
    """skip(x) + tanh(x @ w + b); projection skip when widths change."""
    d_in, d_out = x.shape[-1], w.shape[1]
    if w.shape[0] != d_in:
        raise ConfigurationError(
            f"residual weights expect width {w.shape[0]}, input has {d_in}"
        )
    if w_skip is None and d_in != d_out:
        raise ConfigurationError(
            f"width change {d_in} -> {d_out} requires a skip projection"
        )
    body = ad.tanh(_time_matmul(x, w) + b)
    skip = x if w_skip is None else _time_matmul(x, w_skip)
    return skip + body


def _residual_chain(h, params, prefix, n_blocks):
    for i in range(n_blocks):
        h = residual_block(
            h,
            params[f"{prefix}{i}.w"],
            params[f"{prefix}{i}.b"],
            params.get(f"{prefix}{i}.w_skip"),
        )
    return h


def _check_features(x, n_mels, who):
    if x.shape[-1] != n_mels:
        raise ValueError(
            f"{who} expects {n_mels} features, got input shape {x.shape}"
        )


def encode_dynamics(x, params, config):
    """Dynamics branch: LSTM stack, then residual chain; T x n_mels -> T x k."""
    x = _as_tensor(x)
    _check_features(x, config.n_mels, "dynamics encoder")
    h, squeeze = _ensure_batch(x)
    for i in range(len(config.dynamics_lstm_widths)):
        h = lstm_forward(
            h,
            params[f"dynamics.lstm{i}.w_x"],
            params[f"dynamics.lstm{i}.w_h"],
            params[f"dynamics.lstm{i}.b"],
        )
    h = _residual_chain(
        h, params, "dynamics.residual", len(config.dynamics_residual_widths)
    )
    return h.reshape(h.shape[1:]) if squeeze else h


def encode_content(x, params, config):
    """Content branch: [LSTM + instance norm] stack, then residual chain."""
    x = _as_tensor(x)
    _check_features(x, config.n_mels, "content encoder")
    h, squeeze = _ensure_batch(x)
    for i in range(len(config.content_lstm_widths)):
        h = lstm_forward(
            h,
            params[f"content.lstm{i}.w_x"],
            params[f"content.lstm{i}.w_h"],
            params[f"content.lstm{i}.b"],
        )
        h = instance_normalize(h, config.epsilon_in)
    h = _residual_chain(
        h, params, "content.residual", len(config.content_residual_widths)
    )
    return h.reshape(h.shape[1:]) if squeeze else h


def decode(z_s, z_c, params, config):
    """Concatenate latents, residual chain, LSTM stack, linear head -> T x n_mels."""
    z_s, z_c = _as_tensor(z_s), _as_tensor(z_c)
    if z_s.shape != z_c.shape:
        raise ValueError(
            f"latent shapes must match, got {z_s.shape} and {z_c.shape}"
        )
    hs, squeeze = _ensure_batch(z_s)
    hc, _ = _ensure_batch(z_c)
    h = ad.concat([hs, hc], axis=-1)
    if h.shape[-1] != config.decoder_input_width:
        raise ValueError(
            f"decoder expects concatenated width {config.decoder_input_width}, "
            f"got {h.shape[-1]}"
        )
    h = _residual_chain(
        h, params, "decoder.residual", len(config.decoder_residual_widths)
    )
    for i in range(len(config.decoder_lstm_widths)):
        h = lstm_forward(
            h,
            params[f"decoder.lstm{i}.w_x"],
            params[f"decoder.lstm{i}.w_h"],
            params[f"decoder.lstm{i}.b"],
        )
    h = _time_matmul(h, params["decoder.out.w"]) + params["decoder.out.b"]
    return h.reshape(h.shape[1:]) if squeeze else h


def reconstruct(x, params, config):
    """Full forward pass; returns (z_s, z_c, x_hat)."""
    z_s = encode_dynamics(x, params, config)
    z_c = encode_content(x, params, config)
    return z_s, z_c, decode(z_s, z_c, params, config)


# -- losses -------------------------------------------------------------------


def reconstruction_loss(x_hat, x, n):
    """(1/N) * sum of squared reconstruction errors over the batch."""
    x_hat, x = _as_tensor(x_hat), _as_tensor(x)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    if n < 1:
        raise ValueError(f"batch size must be positive, got {n}")
    return ad.squared_error(x_hat, x) * (1.0 / n)


def total_loss(l_rec, l_pred, l_eigen, weights):
    """Weighted sum w_rec*L_rec + w_pred*L_pred + w_eigen*L_eigen."""
    w_rec, w_pred, w_eigen = (float(w) for w in weights)
    if min(w_rec, w_pred, w_eigen) < 0:
        raise ValueError(f"weights must be nonnegative, got {weights}")
    return w_rec * _as_tensor(l_rec) + w_pred * _as_tensor(l_pred) + (
        w_eigen * _as_tensor(l_eigen)
    )


# -- checkpoint format --------------------------------------------------------


def save_checkpoint(path, params, config, metadata=None):
    """Write parameters + config to the binary checkpoint format.

    Layout: 8-byte magic, uint32 version, then one record per parameter
    (uint32 name length, UTF-8 name, uint32 rank, uint32 dims, float32
    little-endian data), a zero name-length sentinel, and a UTF-8 JSON
    trailer holding the model config and free-form metadata. The write is
    atomic (temp file + rename).
    """
    payload = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        payload.append(struct.pack("<I", len(encoded)))
        payload.append(encoded)
        payload.append(struct.pack("<I", arr.ndim))
        payload.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(arr.tobytes())
    payload.append(struct.pack("<I", 0))
    trailer = {"model_config": config.to_dict(), "metadata": metadata or {}}
    payload.append(json.dumps(trailer, sort_keys=True).encode("utf-8"))

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(payload))
    os.replace(tmp, path)


class CheckpointError(ValueError):
    """Checkpoint file is malformed or truncated."""


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParameters, ModelConfig, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}: {blob[:8]!r}")

    def read_u32(offset):
        if offset + 4 > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        return struct.unpack_from("<I", blob, offset)[0], offset + 4

    version, pos = read_u32(8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    table = {}
    while True:
        name_len, pos = read_u32(pos)
        if name_len == 0:
            break
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank, pos = read_u32(pos)
        dims = []
        for _ in range(rank):
            d, pos = read_u32(pos)
            dims.append(d)
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        end = pos + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated tensor data for {name}")
        data = np.frombuffer(blob[pos:end], dtype="<f4").reshape(dims)
        table[name] = Tensor(data.astype(np.float32), requires_grad=True)
        pos = end

    try:
        trailer = json.loads(blob[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad JSON trailer in {path}: {exc}") from exc
    config = ModelConfig.from_dict(trailer["model_config"])
    return ModelParameters(table), config, trailer.get("metadata", {})
