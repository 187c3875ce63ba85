"""Datasets: IDX ingestion, the class-disjoint split, synthetic blobs and a binary cache."""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor.random import rng as make_rng

NORMALIZATION = "affine[0,255]->[-1,1]"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the byte offset."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images [N, C, H, W] in [-1, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_set: frozenset = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{images.shape[0]} images but labels shaped {labels.shape}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        classes = frozenset(int(c) for c in np.unique(labels)) if self.class_set is None else frozenset(self.class_set)
        if not set(int(c) for c in np.unique(labels)) <= classes:
            raise ValueError("labels outside class_set")
        object.__setattr__(self, "class_set", classes)
        if images.size and (images.min() < -1.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.class_set)

    def of_class(self, k: int) -> np.ndarray:
        return self.images[self.labels == k]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).astype("<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels).astype("<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    private_classes: frozenset
    public_classes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "private_classes", frozenset(int(c) for c in self.private_classes))
        object.__setattr__(self, "public_classes", frozenset(int(c) for c in self.public_classes))


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array shaped by its header."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(raw)}, need 4 bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}"
        )
    type_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0 or type_code not in _IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(
            f"{path}: truncated dimension header at byte offset {len(raw)}, need {header_end} bytes"
        )
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[type_code]
    need = int(np.prod(dims)) * dtype.itemsize
    have = len(raw) - header_end
    if have < need:
        raise IdxFormatError(
            f"{path}: truncated payload at byte offset {len(raw)}, expected {header_end + need} bytes"
        )
    if have > need:
        raise IdxFormatError(f"{path}: {have - need} trailing bytes at byte offset {header_end + need}")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x0801 for 1-D, 0x0803 for 3-D, ...)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("write_idx only writes unsigned bytes")
    magic = (0x08 << 8) | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header + np.ascontiguousarray(array).tobytes())


def bytes_to_unit(pixels: np.ndarray) -> np.ndarray:
    """Map bytes 0..255 affinely onto [-1, 1]."""
    return pixels.astype(np.float64) / 127.5 - 1.0


def unit_to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels "
            f"(label count field at byte offset 4 of {labels_path})"
        )
    x = bytes_to_unit(images)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# split protocol
# ---------------------------------------------------------------------------


def split_disjoint(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, dict[int, int]]:
    """Class-disjoint private/public partition.

    Private labels are re-indexed densely to 0..K-1 (the returned map sends raw
    label -> dense label). Public keeps its raw labels only for auditing; no
    downstream stage reads them.
    """
    overlap = spec.private_classes & spec.public_classes
    if overlap:
        raise SplitError(f"private and public classes overlap: {sorted(overlap)}")
    if not spec.private_classes or not spec.public_classes:
        raise SplitError("both class sets must be nonempty")
    labels = dataset.labels
    priv_mask = np.isin(labels, sorted(spec.private_classes))
    pub_mask = np.isin(labels, sorted(spec.public_classes))
    if not pub_mask.any():
        raise SplitError("public split is empty")
    if not priv_mask.any():
        raise SplitError("private split is empty")
    index_map = {c: i for i, c in enumerate(sorted(spec.private_classes))}
    dense = np.array([index_map[int(c)] for c in labels[priv_mask]], dtype=np.int64)
    private = Dataset(dataset.images[priv_mask], dense, frozenset(index_map.values()))
    public = Dataset(
        dataset.images[pub_mask],
        labels[pub_mask],
        frozenset(spec.public_classes) & dataset.class_set,
    )
    return private, public, index_map


def holdout_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random (train, holdout) partition."""
    n = len(dataset)
    order = make_rng(seed, "holdout").permutation(n)
    n_hold = max(1, int(round(n * fraction)))
    return dataset.subset(np.sort(order[n_hold:])), dataset.subset(np.sort(order[:n_hold]))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_blobs(n_classes: int, n_per_class: int, image_size: int = 16, seed: int = 0) -> Dataset:
    """One Gaussian blob per image at a class-specific location, with jitter and noise."""
    if min(n_classes, n_per_class, image_size) <= 0:
        raise ValueError("counts and image_size must be positive")
    r = make_rng(seed, "synth_blobs")
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    radius = image_size * 0.3
    centres = np.stack([np.cos(angles), np.sin(angles)], axis=1) * radius + (image_size - 1) / 2
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    width = max(1.0, image_size / 10)
    images = np.empty((n_classes * n_per_class, 1, image_size, image_size))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    for i, k in enumerate(labels):
        cy, cx = centres[k] + r.normal(0.0, 0.05 * image_size, size=2)
        amp = r.uniform(0.7, 1.0)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        noisy = blob + r.normal(0.0, 0.03, size=blob.shape)
        images[i, 0] = np.clip(2.0 * noisy - 1.0, -1.0, 1.0)
    return Dataset(images, labels, frozenset(range(n_classes)))


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------


def save_cache(dataset: Dataset, path) -> Path:
    """Write ``path`` (little-endian float64 images then int64 labels) and ``path.json``."""
    path = Path(path)
    payload = (
        np.ascontiguousarray(dataset.images).astype("<f8").tobytes()
        + np.ascontiguousarray(dataset.labels).astype("<i8").tobytes()
    )
    meta = {
        "shape": list(dataset.images.shape),
        "class_set": sorted(dataset.class_set),
        "normalization": NORMALIZATION,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    _atomic_write(path, payload)
    _atomic_write(Path(str(path) + ".json"), json.dumps(meta, indent=2).encode())
    return path


def load_cache(path) -> Dataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise ValueError(f"{path}: content hash does not match sidecar")
    shape = tuple(meta["shape"])
    n_img = int(np.prod(shape))
    images = np.frombuffer(payload, dtype="<f8", count=n_img).reshape(shape).astype(np.float64)
    labels = np.frombuffer(payload, dtype="<i8", offset=n_img * 8).astype(np.int64)
    return Dataset(images, labels, frozenset(meta["class_set"]))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# bundled MNIST subset
# ---------------------------------------------------------------------------


def export_mnist_subset(dest_dir) -> tuple[Path, Path]:
    """Write the 5000-image MNIST subset shipped with mlxtend as IDX files."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on optional extra
        raise RuntimeError("exporting the MNIST subset needs the 'mnist' extra (mlxtend)") from exc
    x, y = mnist_data()
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    img_path = dest / "mnist5k-images-idx3-ubyte"
    lbl_path = dest / "mnist5k-labels-idx1-ubyte"
    write_idx(img_path, x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(lbl_path, y.astype(np.uint8))
    return img_path, lbl_path
