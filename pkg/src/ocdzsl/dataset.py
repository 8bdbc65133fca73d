"""Data model, binary container format, synthetic data, and GZSL splits.

On-disk layout (integers and floats little-endian, matrices row-major):

* ``features.bin``   magic ``ZSLF``, u32 N, u32 d_x, N*d_x float32
* ``labels.bin``     magic ``ZSLL``, u32 N, N u32 class ids
* ``attributes.bin`` magic ``ZSLA``, u32 C, u32 L, C*L float32
* ``splits.txt``     UTF-8 lines ``seen: <ids>`` and ``unseen: <ids>``,
  optional ``test_idx: <sample indices>`` for externally fixed test
  splits; ``#`` starts a comment.

In memory everything is float64; payloads are quantized to float32 at
generation time so save -> load is the exact identity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .numgrad import Rng

MAGIC_FEATURES = b"ZSLF"
MAGIC_LABELS = b"ZSLL"
MAGIC_ATTRIBUTES = b"ZSLA"


@dataclass
class Dataset:
    """Feature matrix, per-sample labels, per-class attributes, class split."""

    features: np.ndarray  # (N, d_x) float64
    labels: np.ndarray  # (N,) int64
    attributes: np.ndarray  # (C, L) float64, row c = attribute vector of class c
    seen_classes: np.ndarray  # sorted int64 ids
    unseen_classes: np.ndarray  # sorted int64 ids
    test_idx: np.ndarray | None = None  # optional externally fixed test rows

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    def validate(self) -> None:
        n, d = self.features.shape
        c, l = self.attributes.shape
        if n == 0 or l == 0:
            raise DataError("dataset needs at least one sample and one attribute dimension")
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} does not match N={n}")
        seen = set(self.seen_classes.tolist())
        unseen = set(self.unseen_classes.tolist())
        if seen & unseen:
            raise DataError(f"seen and unseen class sets overlap: {sorted(seen & unseen)}")
        known = seen | unseen
        bad = set(np.unique(self.labels).tolist()) - known
        if bad:
            raise DataError(f"labels reference classes outside seen/unseen sets: {sorted(bad)}")
        if known and max(known) >= c:
            raise DataError(f"split references class id >= C={c}")
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.attributes)):
            raise DataError("features/attributes contain non-finite values")
        if self.test_idx is not None:
            if self.test_idx.size and (self.test_idx.min() < 0 or self.test_idx.max() >= n):
                raise DataError("test_idx references sample indices outside the dataset")

    def class_rows(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def seen_rows(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.seen_classes))

    def unseen_rows(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.unseen_classes))


@dataclass
class GzslSplit:
    """Per-class 80/20 partition of seen samples plus all unseen samples."""

    train_seen_idx: np.ndarray
    test_seen_idx: np.ndarray
    test_unseen_idx: np.ndarray


@dataclass
class SynthConfig:
    """Knobs for the deterministic synthetic cluster generator."""

    num_seen: int = 8
    num_unseen: int = 4
    samples_per_class: int = 100
    d_x: int = 16
    attr_dim: int = 8
    class_spread: float = 1.0
    class_separation: float = 2.0
    attribute_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_seen", "num_unseen", "samples_per_class", "d_x", "attr_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.class_separation <= 0:
            raise ParameterError("class_separation must be > 0")
        # class_spread == 0 is the documented limiting mode (all samples at the center)
        if self.class_spread < 0 or self.attribute_noise < 0:
            raise ParameterError("spreads must be >= 0")


def make_synthetic(config: SynthConfig) -> Dataset:
    """Deterministic Gaussian clusters whose attributes predict features.

    Class attribute prototypes are drawn N(0, class_separation^2) per
    entry; feature centers are a fixed linear image of the prototypes plus
    N(0, attribute_noise^2) offsets, and samples scatter N(0,
    class_spread^2) around their center. Classes 0..num_seen-1 are seen,
    the rest unseen. Payloads are rounded to float32 so that saving and
    re-loading reproduces the dataset bit-exactly.
    """
    config.validate()
    r_attr, r_map, r_offset, r_samples = Rng(config.seed).split(4)
    c_total = config.num_seen + config.num_unseen
    l = config.attr_dim

    # Prototypes come from a low-rank factor model so that unseen-class
    # attribute vectors lie inside the subspace the seen classes span
    # (real attribute sets are correlated the same way); per-entry
    # variance stays class_separation^2.
    rank = max(1, min(l, config.num_seen - 1))
    coords = r_attr.normal((c_total, rank), std=config.class_separation)
    basis = r_attr.normal((rank, l), std=1.0 / math.sqrt(rank))
    attrs = coords @ basis
    mix = r_map.normal((l, config.d_x), std=1.0 / math.sqrt(l))
    centers = attrs @ mix + r_offset.normal((c_total, config.d_x), std=config.attribute_noise)

    n_per = config.samples_per_class
    features = np.empty((c_total * n_per, config.d_x))
    labels = np.empty(c_total * n_per, dtype=np.int64)
    for c in range(c_total):
        rows = slice(c * n_per, (c + 1) * n_per)
        features[rows] = centers[c] + r_samples.normal((n_per, config.d_x), std=config.class_spread)
        labels[rows] = c

    dataset = Dataset(
        features=features.astype("<f4").astype(np.float64),
        labels=labels,
        attributes=attrs.astype("<f4").astype(np.float64),
        seen_classes=np.arange(config.num_seen, dtype=np.int64),
        unseen_classes=np.arange(config.num_seen, c_total, dtype=np.int64),
    )
    dataset.validate()
    return dataset


def split_gzsl(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> GzslSplit:
    """Seeded per-class split: floor(ratio * n_c) rows train, rest test.

    Every unseen-class sample lands in test_unseen. ratio must leave a
    non-empty test side, so 0 < ratio < 1.
    """
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"ratio must be in (0, 1), got {ratio}")
    rng = Rng(seed)
    train_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    for c in np.sort(dataset.seen_classes):
        rows = dataset.class_rows(int(c))
        if rows.size < 2:
            raise DataError(f"seen class {int(c)} has {rows.size} samples, needs >= 2 to split")
        perm = rows[rng.permutation(rows.size)]
        k = int(ratio * rows.size)
        train_parts.append(perm[:k])
        test_parts.append(perm[k:])
    train = np.sort(np.concatenate(train_parts)) if train_parts else np.empty(0, np.int64)
    test = np.sort(np.concatenate(test_parts)) if test_parts else np.empty(0, np.int64)
    return GzslSplit(
        train_seen_idx=train.astype(np.int64),
        test_seen_idx=test.astype(np.int64),
        test_unseen_idx=dataset.unseen_rows().astype(np.int64),
    )


def _read_exact(fh, n: int, path: Path, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated {what} at offset {offset}")
    return data


def _read_header(fh, path: Path, magic: bytes, n_fields: int) -> tuple[int, ...]:
    got = _read_exact(fh, 4, path, "magic")
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r} at offset 0, expected {magic!r}")
    raw = _read_exact(fh, 4 * n_fields, path, "header")
    return struct.unpack(f"<{n_fields}I", raw)


def _read_matrix(path: Path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, cols = _read_header(fh, path, magic, 2)
        payload = _read_exact(fh, 4 * rows * cols, path, "float payload")
        extra = fh.read(1)
        if extra:
            raise FormatError(f"{path}: trailing bytes at offset {fh.tell() - 1}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)


def _write_matrix(path: Path, magic: bytes, matrix: np.ndarray) -> None:
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<2I", rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def _parse_id_list(text: str, path: Path, line_no: int) -> np.ndarray:
    try:
        ids = np.array([int(tok) for tok in text.split()], dtype=np.int64)
    except ValueError as err:
        raise FormatError(f"{path}: line {line_no}: {err}") from None
    if np.any(ids < 0):
        raise FormatError(f"{path}: line {line_no}: negative id")
    return ids


def load_dataset(dir_path) -> Dataset:
    """Load and validate a dataset directory written by :func:`save_dataset`."""
    root = Path(dir_path)
    for name in ("features.bin", "labels.bin", "attributes.bin", "splits.txt"):
        if not (root / name).exists():
            raise FormatError(f"{root / name}: missing file")

    features = _read_matrix(root / "features.bin", MAGIC_FEATURES)

    labels_path = root / "labels.bin"
    with open(labels_path, "rb") as fh:
        (n_labels,) = _read_header(fh, labels_path, MAGIC_LABELS, 1)
        payload = _read_exact(fh, 4 * n_labels, labels_path, "label payload")
        if fh.read(1):
            raise FormatError(f"{labels_path}: trailing bytes at offset {fh.tell() - 1}")
    labels = np.frombuffer(payload, dtype="<u4").astype(np.int64)

    attributes = _read_matrix(root / "attributes.bin", MAGIC_ATTRIBUTES)

    splits_path = root / "splits.txt"
    seen = unseen = test_idx = None
    for line_no, raw in enumerate(splits_path.read_text("utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key == "seen":
            seen = _parse_id_list(rest, splits_path, line_no)
        elif key == "unseen":
            unseen = _parse_id_list(rest, splits_path, line_no)
        elif key == "test_idx":
            test_idx = _parse_id_list(rest, splits_path, line_no)
        else:
            raise FormatError(f"{splits_path}: line {line_no}: unknown key {key!r}")
    if seen is None or unseen is None:
        raise FormatError(f"{splits_path}: needs both 'seen:' and 'unseen:' lines")

    dataset = Dataset(
        features=features,
        labels=labels,
        attributes=attributes,
        seen_classes=np.sort(seen),
        unseen_classes=np.sort(unseen),
        test_idx=test_idx,
    )
    try:
        dataset.validate()
    except DataError as err:
        raise FormatError(f"{root}: {err}") from None
    if features.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{root}: features.bin N={features.shape[0]} but labels.bin N={labels.shape[0]}"
        )
    return dataset


def save_dataset(dataset: Dataset, dir_path) -> None:
    """Write the four-file directory layout; inverse of :func:`load_dataset`."""
    dataset.validate()
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)

    _write_matrix(root / "features.bin", MAGIC_FEATURES, dataset.features)

    with open(root / "labels.bin", "wb") as fh:
        fh.write(MAGIC_LABELS)
        fh.write(struct.pack("<I", dataset.labels.shape[0]))
        fh.write(dataset.labels.astype("<u4").tobytes())

    _write_matrix(root / "attributes.bin", MAGIC_ATTRIBUTES, dataset.attributes)

    lines = [
        "seen: " + " ".join(str(int(c)) for c in dataset.seen_classes),
        "unseen: " + " ".join(str(int(c)) for c in dataset.unseen_classes),
    ]
    if dataset.test_idx is not None:
        lines.append("test_idx: " + " ".join(str(int(i)) for i in dataset.test_idx))
    (root / "splits.txt").write_text("\n".join(lines) + "\n", "utf-8")
