"""IDX ingestion, preprocessing, public noise and targeted pair poisoning."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .errors import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    DataError,
    ShapeError,
    TruncatedFileError,
)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ROOT_ENV = "SUBLIM_DATA_ROOT"

FASHION_CLASSES = (
    "T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
    "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot",
)
TASKS = ("mnist", "fashion")


@dataclass(frozen=True, eq=False)
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    task: str
    split: str = "train"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {inputs.shape}")
        if len(inputs) != len(labels):
            raise ShapeError(f"{len(inputs)} inputs but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= 10):
            raise ShapeError("labels must lie in [0, 10)")
        if self.task not in TASKS:
            raise ShapeError(f"task must be one of {TASKS}, got {self.task!r}")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledSet":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_header(fh, path, magic, n_dims):
    head = fh.read(4 + 4 * n_dims)
    if len(head) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", head[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    if len(head) < 4 + 4 * n_dims:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    return struct.unpack(f">{n_dims}I", head[4:])


def read_idx_images(path) -> np.ndarray:
    with _open(path) as fh:
        n, rows, cols = _read_header(fh, path, IMAGES_MAGIC, 3)
        want = n * rows * cols
        buf = fh.read(want)
    if len(buf) < want:
        raise TruncatedFileError(f"{path}: expected {want} pixel bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        (n,) = _read_header(fh, path, LABELS_MAGIC, 1)
        buf = fh.read(n)
    if len(buf) < n:
        raise TruncatedFileError(f"{path}: expected {n} label bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8)


def load_idx(images_path, labels_path, task="mnist", split="train") -> LabeledSet:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images vs {len(labels)} labels")
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledSet(flat, labels.astype(np.int64), task, split)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DataError(f"dataset root not given; set {DATA_ROOT_ENV} or pass a path")
    return Path(root)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"no {stem}[.gz] under {directory}")


def load_task(task: str, split: str = "train", root=None) -> LabeledSet:
    """Load ``<root>/<task>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    prefix = {"train": "train", "test": "t10k"}[split]
    d = data_root(root) / task
    return load_idx(_find(d, f"{prefix}-images-idx3-ubyte"), _find(d, f"{prefix}-labels-idx1-ubyte"),
                    task, split)


def take_train_subset(data: LabeledSet, n: int, seed: int, purpose="subset") -> LabeledSet:
    """First ``n`` items after a seeded shuffle."""
    if n > len(data):
        raise DataError(f"requested {n} items from a set of {len(data)}")
    perm = rng_mod.stream(seed, f"{purpose}/{data.task}/{data.split}").permutation(len(data))
    return data.subset(perm[:n])


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "uniform784"
    batches: int = 100
    batch_size: int = 1024
    resample: str = "fixed"

    def __post_init__(self):
        if self.kind not in ("uniform784", "gaussian_state1024"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.resample not in ("fixed", "per_epoch"):
            raise ConfigError(f"resample must be 'fixed' or 'per_epoch', got {self.resample!r}")
        if self.batches < 1 or self.batch_size < 1:
            raise ConfigError("noise batches and batch_size must be positive")


def make_noise(spec: NoiseSpec, seed: int, epoch: int = 0) -> np.ndarray:
    """Public noise of shape ``(batches, batch_size, dim)``.

    ``fixed`` specs ignore ``epoch``; ``per_epoch`` specs draw a fresh,
    reproducible set for every epoch.
    """
    key = 0 if spec.resample == "fixed" else epoch + 1
    gen = rng_mod.stream(seed, "noise", key)
    shape = (spec.batches, spec.batch_size)
    if spec.kind == "uniform784":
        return gen.uniform(-1.0, 1.0, size=shape + (784,))
    x = gen.standard_normal(size=shape + (1024,))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass(frozen=True)
class PoisonSpec:
    class_a: int = 1
    class_b: int = 5

    def __post_init__(self):
        if self.class_a == self.class_b:
            raise ConfigError("poison pair classes must differ")
        for c in (self.class_a, self.class_b):
            if not 0 <= c < 10:
                raise ConfigError(f"poison class {c} outside [0, 10)")

    @classmethod
    def from_names(cls, a: str, b: str) -> "PoisonSpec":
        return cls(FASHION_CLASSES.index(a), FASHION_CLASSES.index(b))


def swap_labels(labels, spec: PoisonSpec) -> np.ndarray:
    labels = np.array(labels, dtype=np.int64)
    a, b = labels == spec.class_a, labels == spec.class_b
    labels[a], labels[b] = spec.class_b, spec.class_a
    return labels


def poison_pair(data: LabeledSet, spec: PoisonSpec) -> LabeledSet:
    """Swap the two targeted Fashion-MNIST labels; everything else is untouched."""
    if data.task != "fashion":
        raise DataError(f"pair poisoning applies to the fashion task, got {data.task!r}")
    return replace(data, labels=swap_labels(data.labels, spec))


def pair_subset(data: LabeledSet, spec: PoisonSpec) -> LabeledSet:
    mask = (data.labels == spec.class_a) | (data.labels == spec.class_b)
    return data.subset(np.flatnonzero(mask))


def normalize_for_model(pixels, family: str) -> np.ndarray:
    """Classical models see ``2x - 1``; quantum models get raw pixels (encoded later)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if family == "classical":
        return 2.0 * pixels - 1.0
    if family == "quantum":
        return pixels
    raise ConfigError(f"unknown model family {family!r}")
