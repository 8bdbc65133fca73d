"""The three networks and the attribute-space classifier.

* Encoder: features -> hidden -> (mu, logvar) of the latent Gaussian.
* Decoder: [latent, class attributes] -> hidden -> reconstructed features.
* Regressor: features -> hidden -> predicted attribute vector; its output
  doubles as the embedding for triplet/center losses.
* Centers: learned per-class centers in the regressor's output space.

Hidden layers are leaky-ReLU (slope 0.2), outputs linear. Classification
is nearest class attribute in Euclidean distance, ties going to the
smallest class id.

Checkpoint file format (little-endian): magic ``OCDM``, u32 version,
u32 block count, then per block u16 name length + UTF-8 name + u32 rows +
u32 cols + float32 row-major data, then a u32-length-prefixed UTF-8
JSON echo of the training configuration.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, StateError
from .numgrad import (
    ParamStore,
    Rng,
    Tensor,
    as_tensor,
    concat_cols,
    dense_forward,
    exp,
    no_grad,
)

CHECKPOINT_MAGIC = b"OCDM"
CHECKPOINT_VERSION = 1

# Floor for the latent std when converting sigma -> logvar in tests/tools;
# keeps log() away from 0 while leaving z ~= mu.
SIGMA_FLOOR = 1e-12


class Encoder:
    """MLP mapping features to the latent posterior's (mu, logvar).

    ``logvar_bias`` sets the initial posterior log-variance. Starting it
    well below 0 makes z nearly deterministic at step one, so the decoder
    picks the latent path up before the KL term can push it to ignore z;
    the KL then inflates the posterior width to its equilibrium.
    """

    def __init__(self, d_x: int, hidden_dim: int, latent_dim: int, rng: Rng,
                 params: ParamStore | None = None, prefix: str = "enc",
                 logvar_bias: float = 0.0):
        self.d_x = d_x
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.prefix = prefix
        self.params = params if params is not None else ParamStore()
        self.params.dense(f"{prefix}.h", d_x, hidden_dim, rng)
        self.params.dense(f"{prefix}.mu", hidden_dim, latent_dim, rng)
        self.params.dense(f"{prefix}.logvar", hidden_dim, latent_dim, rng)
        if logvar_bias:
            self.params[f"{prefix}.logvar.b"].data += logvar_bias


class Decoder:
    """MLP mapping [latent, attributes] back to feature space."""

    def __init__(self, latent_dim: int, attr_dim: int, d_x: int, hidden_dim: int, rng: Rng,
                 params: ParamStore | None = None, prefix: str = "dec"):
        self.latent_dim = latent_dim
        self.attr_dim = attr_dim
        self.d_x = d_x
        self.hidden_dim = hidden_dim
        self.prefix = prefix
        self.params = params if params is not None else ParamStore()
        self.params.dense(f"{prefix}.h", latent_dim + attr_dim, hidden_dim, rng)
        self.params.dense(f"{prefix}.out", hidden_dim, d_x, rng)


class Regressor:
    """MLP mapping features to predicted attribute vectors."""

    def __init__(self, d_x: int, hidden_dim: int, attr_dim: int, rng: Rng,
                 params: ParamStore | None = None, prefix: str = "reg"):
        self.d_x = d_x
        self.hidden_dim = hidden_dim
        self.attr_dim = attr_dim
        self.prefix = prefix
        self.params = params if params is not None else ParamStore()
        self.params.dense(f"{prefix}.h", d_x, hidden_dim, rng)
        self.params.dense(f"{prefix}.out", hidden_dim, attr_dim, rng)


class Centers:
    """Per-class centers in embedding space, moved toward batch means.

    A class's row is unset until the first batch containing it, at which
    point it is initialized to that batch's class mean.
    """

    def __init__(self, num_classes: int, dim: int, gamma: float = 0.5):
        if not 0.0 < gamma <= 1.0:
            raise ParameterError(f"center learning rate must be in (0, 1], got {gamma}")
        self.values = np.zeros((num_classes, dim))
        self.initialized = np.zeros(num_classes, dtype=bool)
        self.gamma = gamma

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def ensure_initialized(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        """Initialize any not-yet-seen class center to its batch mean."""
        labels = np.asarray(labels)
        for c in np.unique(labels):
            if not self.initialized[c]:
                self.values[c] = embeddings[labels == c].mean(axis=0)
                self.initialized[c] = True


def encode(enc: Encoder, x) -> tuple[Tensor, Tensor]:
    """Row-wise latent posterior parameters (mu, logvar)."""
    x = as_tensor(x)
    h = dense_forward(enc.params, f"{enc.prefix}.h", x, "leaky_relu")
    mu = dense_forward(enc.params, f"{enc.prefix}.mu", h, "linear")
    logvar = dense_forward(enc.params, f"{enc.prefix}.logvar", h, "linear")
    return mu, logvar


def reparameterize(mu, logvar, rng: Rng) -> Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    mu = as_tensor(mu)
    logvar = as_tensor(logvar)
    if mu.data.shape != logvar.data.shape:
        raise DimensionError(f"mu shape {mu.data.shape} != logvar shape {logvar.data.shape}")
    eps = rng.standard_normal(mu.data.shape)
    return mu + exp(logvar * 0.5) * eps


def decode(dec: Decoder, z, a) -> Tensor:
    """Decode each row's [z_i, a_i] concatenation to feature space."""
    z = as_tensor(z)
    a = as_tensor(a)
    if z.data.shape[0] != a.data.shape[0]:
        raise DimensionError(f"z rows {z.data.shape[0]} != attribute rows {a.data.shape[0]}")
    h = dense_forward(dec.params, f"{dec.prefix}.h", concat_cols(z, a), "leaky_relu")
    return dense_forward(dec.params, f"{dec.prefix}.out", h, "linear")


def regress(reg: Regressor, x) -> Tensor:
    """Predicted attribute vectors, used both as output and as embedding."""
    x = as_tensor(x)
    h = dense_forward(reg.params, f"{reg.prefix}.h", x, "leaky_relu")
    return dense_forward(reg.params, f"{reg.prefix}.out", h, "linear")


def predict_attributes(reg: Regressor, x: np.ndarray) -> np.ndarray:
    """Frozen regressor forward pass returning a plain array."""
    with no_grad():
        return regress(reg, x).data


def _candidate_array(candidates) -> np.ndarray:
    cand = np.unique(np.asarray(sorted(int(c) for c in candidates), dtype=np.int64))
    if cand.size == 0:
        raise ParameterError("candidate class set is empty")
    return cand


def classify_batch(a_hat: np.ndarray, attributes: np.ndarray, candidates) -> np.ndarray:
    """Nearest class attribute (Euclidean) per row; ties -> smallest id."""
    cand = _candidate_array(candidates)
    if cand.max() >= attributes.shape[0]:
        raise ParameterError(f"candidate id {int(cand.max())} >= number of classes")
    a_hat = np.atleast_2d(np.asarray(a_hat, dtype=np.float64))
    diff = a_hat[:, None, :] - attributes[cand][None, :, :]
    dists = np.einsum("ijk,ijk->ij", diff, diff)
    # argmin returns the first minimum; candidates are sorted ascending,
    # so ties resolve to the smallest class id.
    return cand[np.argmin(dists, axis=1)]


def classify(a_hat, attributes: np.ndarray, candidates) -> int:
    """Single-vector version of :func:`classify_batch`."""
    return int(classify_batch(np.asarray(a_hat, dtype=np.float64).reshape(1, -1), attributes, candidates)[0])


def write_model_file(path, blocks: dict[str, np.ndarray], echo: str) -> None:
    """Write named float matrices plus a config echo in checkpoint format."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", CHECKPOINT_VERSION, len(blocks)))
        for name, matrix in blocks.items():
            matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
            if matrix.ndim != 2:
                raise ParameterError(f"block {name!r} must be at most 2-D")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<2I", matrix.shape[0], matrix.shape[1]))
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        payload = echo.encode("utf-8")
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


def read_model_file(path) -> tuple[dict[str, np.ndarray], str]:
    """Inverse of :func:`write_model_file`; values come back float64."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated header at offset 4")
        version, n_blocks = struct.unpack("<2I", header)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        blocks: dict[str, np.ndarray] = {}
        for _ in range(n_blocks):
            offset = fh.tell()
            raw = fh.read(2)
            if len(raw) != 2:
                raise FormatError(f"{path}: truncated block name length at offset {offset}")
            (name_len,) = struct.unpack("<H", raw)
            name = fh.read(name_len).decode("utf-8")
            raw = fh.read(8)
            if len(raw) != 8:
                raise FormatError(f"{path}: truncated block header at offset {fh.tell()}")
            rows, cols = struct.unpack("<2I", raw)
            payload = fh.read(4 * rows * cols)
            if len(payload) != 4 * rows * cols:
                raise FormatError(f"{path}: truncated block {name!r} payload at offset {fh.tell()}")
            if name in blocks:
                raise FormatError(f"{path}: duplicate block {name!r}")
            blocks[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated echo length at offset {fh.tell()}")
        (echo_len,) = struct.unpack("<I", raw)
        echo = fh.read(echo_len)
        if len(echo) != echo_len:
            raise FormatError(f"{path}: truncated echo at offset {fh.tell()}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes at offset {fh.tell() - 1}")
    return blocks, echo.decode("utf-8")


def store_blocks(store: ParamStore, prefix_filter: str | None = None) -> dict[str, np.ndarray]:
    """Snapshot a ParamStore as 2-D blocks (vectors become one row)."""
    out = {}
    for name, t in store.items():
        if prefix_filter is None or name.startswith(prefix_filter):
            out[name] = np.atleast_2d(t.data)
    return out


def load_store_blocks(store: ParamStore, blocks: dict[str, np.ndarray]) -> None:
    """Copy checkpoint blocks back into same-shaped store parameters."""
    for name, t in store.items():
        if name not in blocks:
            raise StateError(f"checkpoint is missing parameter {name!r}")
        value = blocks[name].reshape(t.data.shape)
        t.data[...] = value
