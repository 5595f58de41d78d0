"""Datasets for the training-based fitness oracle."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed input file; ``line`` or ``offset`` locate the problem."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        where = f" (line {line})" if line is not None else ""
        where += f" (byte {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.line = line
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("features must be (samples, dims) and labels (samples,)")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def take(self, k: int | None) -> "Dataset":
        if k is None or k >= len(self):
            return self
        return Dataset(self.features[:k], self.labels[:k], self.class_count, self.name)

    def one_hot(self, idx=slice(None)) -> np.ndarray:
        return np.eye(self.class_count)[self.labels[idx]]


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int | None = field(default=None)


def synth_blobs(class_count: int, samples_per_class: int, dims: int, spread: float,
                seed: int = 0, name: str = "blobs") -> Dataset:
    """Isotropic unit-variance Gaussian clusters.

    Class centers are random unit vectors scaled by ``spread``; directions
    are redrawn until they are pairwise distinct.
    """
    if class_count < 2 or samples_per_class < 2 or dims < 1:
        raise ValueError("need class_count >= 2, samples_per_class >= 2, dims >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    if dims == 1 and class_count > 2:
        raise ValueError("one dimension holds at most two distinct unit directions")
    while True:
        directions = rng.normal(size=(class_count, dims))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        gaps = np.linalg.norm(directions[:, None] - directions[None], axis=-1)
        if np.all(gaps[np.triu_indices(class_count, 1)] > 1e-6):
            break
    centers = spread * directions
    labels = np.repeat(np.arange(class_count), samples_per_class)
    features = centers[labels] + rng.normal(size=(len(labels), dims))
    return Dataset(features, labels, class_count, name)


def split(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Stratified train/val/test split, a pure function of its arguments."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(len(idx) * fr[0]))
        n_val = int(round(len(idx) * fr[1]))
        n_test = len(idx) - n_train - n_val
        if min(n_train, n_val, n_test) < 1:
            raise ValueError(f"class {c} with {len(idx)} samples is too small to "
                             f"appear in every partition")
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return DatasetSplit(train, val, test, seed)


# --------------------------------------------------------------------------
# loaders


@dataclass(frozen=True)
class DelimitedSchema:
    label_column: int = -1
    delimiter: str = ","
    header: bool = False
    normalize: bool = False
    class_count: int | None = None
    take: int | None = None


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span


def load_delimited(path, schema: DelimitedSchema = DelimitedSchema(),
                   name: str | None = None) -> Dataset:
    """Load a delimited text file with one sample per row and an integer
    label column.  ``normalize`` min-max scales each feature to [0, 1]."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    header_width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for lineno, row in enumerate(reader, start=1):
            if schema.header and lineno == 1:
                header_width = len(row)
                if header_width < 2 or any(not cell.strip() for cell in row):
                    raise DataFormatError("malformed header", line=1)
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataFormatError("need at least one feature and a label", line=lineno)
                if header_width is not None and header_width != width:
                    raise DataFormatError(f"header has {header_width} fields but data rows "
                                          f"have {width}", line=1)
            elif len(row) != width:
                raise DataFormatError(f"expected {width} fields, got {len(row)}", line=lineno)
            cells = list(row)
            raw_label = cells.pop(schema.label_column)
            try:
                label = float(raw_label)
            except ValueError:
                raise DataFormatError(f"label {raw_label!r} is not a number", line=lineno) from None
            if label != int(label) or label < 0:
                raise DataFormatError(f"label {raw_label!r} is not a class index", line=lineno)
            if schema.class_count is not None and label >= schema.class_count:
                raise DataFormatError(f"label {int(label)} out of range "
                                      f"[0, {schema.class_count})", line=lineno)
            try:
                values = [float(c) for c in cells]
            except ValueError as e:
                raise DataFormatError(f"bad feature value: {e}", line=lineno) from None
            if not all(np.isfinite(values)):
                raise DataFormatError("non-finite feature value", line=lineno)
            rows.append(values)
            labels.append(int(label))
            if schema.take is not None and len(rows) >= schema.take:
                break
    if not rows:
        raise DataFormatError("no data rows", line=None)
    x = np.array(rows)
    if schema.normalize:
        x = _minmax(x)
    y = np.array(labels)
    n_classes = schema.class_count or int(y.max()) + 1
    return Dataset(x, y, n_classes, name or Path(path).stem)


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header", offset=len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}",
                              offset=0)
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_idx(path_images, path_labels, *, take: int | None = None,
             normalize: bool = True, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair (MNIST layout, optionally gzipped).

    Images are flattened; with ``normalize`` the bytes are divided by 255.
    """
    img = _read_bytes(path_images)
    lab = _read_bytes(path_labels)
    n_img, rows, cols = _idx_header(img, IDX_IMAGES_MAGIC, 3, path_images)
    (n_lab,) = _idx_header(lab, IDX_LABELS_MAGIC, 1, path_labels)
    if n_img != n_lab:
        raise DataFormatError(f"{n_img} images but {n_lab} labels", offset=4)
    n = n_img if take is None else min(take, n_img)
    need = 16 + n * rows * cols
    if len(img) < need:
        raise DataFormatError(f"{path_images}: truncated image data", offset=len(img))
    if len(lab) < 8 + n:
        raise DataFormatError(f"{path_labels}: truncated label data", offset=len(lab))
    x = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    x = x.reshape(n, rows * cols).astype(float)
    if normalize:
        x /= 255.0
    y = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1, name or Path(path_images).stem)


def write_idx(path_images, path_labels, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())
