"""Desk-scale datasets: procedural gaussian blobs and an IDX reader."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # [N×D] float64
    labels: np.ndarray  # [N] int64
    split: str
    num_classes: int
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        return Dataset((ds.inputs - self.mean) / self.std, ds.labels, ds.split, ds.num_classes, ds.indices)


def class_means(num_classes: int, dim: int, spread: float, seed: int) -> np.ndarray:
    """Class centres on a randomly rotated simplex.

    Pairwise distance is ``max(6 * spread, 1)``; the floor keeps classes apart
    when ``spread == 0``.
    """
    if num_classes > dim:
        raise ValueError(f"need dim >= num_classes for a simplex, got {dim} < {num_classes}")
    rng = stream(seed, "data.means")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    distance = max(6.0 * spread, 1.0)
    return (distance / np.sqrt(2.0)) * q[:, :num_classes].T


def gaussian_blobs(num_classes: int = 4, dim: int = 16, n_per_class: int = 625, spread: float = 0.5,
                   seed: int = 0, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Isotropic gaussian classes split 80/20 into train and test."""
    if num_classes < 2 or dim < 2:
        raise ValueError("gaussian_blobs needs num_classes >= 2 and dim >= 2")
    means = class_means(num_classes, dim, spread, seed)
    rng = stream(seed, "data.samples")
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    noise = rng.standard_normal((labels.size, dim))
    inputs = means[labels] + spread * noise
    perm = stream(seed, "data.split").permutation(labels.size)
    n_test = int(round(test_fraction * labels.size))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train = Dataset(inputs[train_idx], labels[train_idx], "train", num_classes, train_idx)
    test = Dataset(inputs[test_idx], labels[test_idx], "test", num_classes, test_idx)
    return train, test


def standardize(train: Dataset, test: Dataset | None = None, eps: float = 1e-12):
    """Fit per-dimension mean/std on ``train``; apply to both splits."""
    mean = train.inputs.mean(axis=0)
    std = np.maximum(train.inputs.std(axis=0), eps)
    tf = Standardizer(mean, std)
    return tf.apply(train), (tf.apply(test) if test is not None else None), tf


def load_dataset(cfg) -> tuple[Dataset, Dataset]:
    """Standardized (train, test) for a ``DatasetConfig``."""
    train, test = gaussian_blobs(cfg.num_classes, cfg.dim, cfg.n_per_class, cfg.spread, cfg.seed)
    train, test, _ = standardize(train, test)
    return train, test


# ---- IDX ----------------------------------------------------------------------
def parse_idx(raw: bytes, magic: int, ndim: int, source: str = "<bytes>") -> tuple[tuple[int, ...], bytes]:
    """Split an IDX buffer into its dimension extents and unsigned-byte payload."""
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise ParseError(f"{source}: truncated magic at offset 0")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise ParseError(f"{source}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    if len(raw) < header:
        raise ParseError(f"{source}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims, dtype=object))
    if len(raw) != header + n:
        raise ParseError(f"{source}: payload length {len(raw) - header} at offset {header}, expected {n}")
    return tuple(int(d) for d in dims), raw[header:]


def decode_idx(image_bytes: bytes, label_bytes: bytes, num_classes: int | None = None,
               sources: tuple[str, str] = ("<images>", "<labels>")) -> Dataset:
    (n_img, rows, cols), pix = parse_idx(image_bytes, IDX_IMAGES_MAGIC, 3, sources[0])
    (n_lab,), lab = parse_idx(label_bytes, IDX_LABELS_MAGIC, 1, sources[1])
    if n_img != n_lab:
        raise ParseError(f"count mismatch at offset 4: {n_img} images vs {n_lab} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n_img, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 1)
    return Dataset(images, labels, "train", k, np.arange(n_img, dtype=np.int64))


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], images flattened."""
    return decode_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), num_classes,
                      (str(images_path), str(labels_path)))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [N×R×C] and labels [N] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# ---- cache ----------------------------------------------------------------------
def dump_dataset(ds: Dataset, path) -> None:
    doc = {
        "schema_version": 1,
        "split": ds.split,
        "num_classes": ds.num_classes,
        "shape": list(ds.inputs.shape),
        "inputs": ds.inputs.reshape(-1).tolist(),
        "labels": ds.labels.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def read_dataset(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
        shape = tuple(doc["shape"])
        inputs = np.array(doc["inputs"], dtype=np.float64).reshape(shape)
        return Dataset(inputs, np.array(doc["labels"], dtype=np.int64), doc["split"], int(doc["num_classes"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"{path}: malformed dataset cache ({exc})") from exc
