"""MNIST ingestion and reduction.

Loads the four standard IDX files (plain or gzipped), filters to the five
retained digit classes, downscales 28x28 -> 10x10 by bicubic interpolation
and normalizes grayscale to [0, 1].  Also serves seeded training batches and
a small versioned cache format for the reduced dataset.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

REDUCED_CLASSES = (0, 1, 4, 6, 7)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_CACHE_MAGIC = b"SLRD"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHIII")


@dataclass
class DatasetSplit:
    """Reduced dataset: flattened 100-pixel images in [0,1] plus labels."""

    train_pixels: np.ndarray  # (n_train, 100) float32
    train_labels: np.ndarray  # (n_train,) uint8
    test_pixels: np.ndarray  # (n_test, 100) float32
    test_labels: np.ndarray  # (n_test,) uint8
    classes: tuple = REDUCED_CLASSES

    @property
    def n_train(self) -> int:
        return len(self.train_labels)

    @property
    def n_test(self) -> int:
        return len(self.test_labels)

    def validate(self):
        for name in ("train", "test"):
            pix = getattr(self, f"{name}_pixels")
            lab = getattr(self, f"{name}_labels")
            if len(pix) != len(lab):
                raise DataError(f"{name} pixels/labels length mismatch")
            if pix.size and (pix.min() < 0.0 or pix.max() > 1.0):
                raise DataError(f"{name} pixels outside [0,1]")
            if lab.size and not np.isin(lab, self.classes).all():
                raise DataError(f"{name} labels outside retained classes {self.classes}")


def _read_file(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":  # transparent gzip
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


def _read_idx(path, expected_magic, ndim):
    data = _read_file(path)
    header_len = 4 + 4 * ndim
    if len(data) < 4:
        raise DataError(f"{path}: truncated header")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise DataError(
            f"{path}: malformed magic number 0x{magic:08x} (expected 0x{expected_magic:08x})"
        )
    if len(data) < header_len:
        raise DataError(f"{path}: truncated header")
    dims = [int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    n_expected = int(np.prod(dims)) if dims else 0
    payload = np.frombuffer(data, np.uint8, offset=header_len)
    if payload.size < n_expected:
        raise DataError(
            f"{path}: truncated payload ({payload.size} bytes, header promises {n_expected})"
        )
    if payload.size > n_expected:
        raise DataError(
            f"{path}: trailing bytes after payload ({payload.size} bytes, header promises {n_expected})"
        )
    return payload.reshape(dims)


def load_idx(images_path, labels_path):
    """Load one IDX image/label file pair -> (images (N,rows,cols) uint8, labels (N,) uint8)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images, labels


# --- bicubic downscale ------------------------------------------------------

_CR_A = -0.5  # Catmull-Rom


def _cr_kernel(t):
    at = np.abs(t)
    r = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    r[near] = (_CR_A + 2.0) * at[near] ** 3 - (_CR_A + 3.0) * at[near] ** 2 + 1.0
    r[far] = _CR_A * (at[far] ** 3 - 5.0 * at[far] ** 2 + 8.0 * at[far] - 4.0)
    return r


def _resample_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) matrix applying 1-D Catmull-Rom resampling
    with half-pixel-centered mapping and edge clamping."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        x = (i + 0.5) * scale - 0.5
        base = int(np.floor(x))
        taps = np.arange(base - 1, base + 3)
        w = _cr_kernel(x - taps.astype(float))
        for tap, wk in zip(taps, w):
            m[i, min(max(tap, 0), n_in - 1)] += wk
    return m


_M28_10 = _resample_matrix(28, 10)


def downscale_bicubic(images):
    """28x28 -> 10x10 bicubic (Catmull-Rom) downscale, clamped to [0,255].

    Accepts a single image (28,28) or a batch (N,28,28); returns float64.
    """
    img = np.asarray(images, dtype=np.float64)
    single = img.ndim == 2
    if single:
        img = img[None]
    if img.shape[-2:] != (28, 28):
        raise DataError(f"expected 28x28 input images, got {img.shape[-2:]}")
    out = np.einsum("oi,nij,pj->nop", _M28_10, img, _M28_10, optimize=True)
    np.clip(out, 0.0, 255.0, out=out)
    return out[0] if single else out


def _reduce_one(images, labels, classes):
    labels = np.asarray(labels)
    keep = np.isin(labels, classes)
    kept = downscale_bicubic(np.asarray(images)[keep])
    pixels = (kept.reshape(len(kept), kept.shape[1] * kept.shape[2]) / 255.0).astype(np.float32)
    return pixels, labels[keep].astype(np.uint8)


def reduce_dataset(train, test, classes=REDUCED_CLASSES):
    """Filter to the retained classes and downscale/normalize both splits.

    `train` and `test` are (images, labels) pairs as returned by load_idx.
    """
    classes = tuple(sorted(int(c) for c in classes))
    tr_pix, tr_lab = _reduce_one(*train, classes)
    te_pix, te_lab = _reduce_one(*test, classes)
    split = DatasetSplit(tr_pix, tr_lab, te_pix, te_lab, classes)
    split.validate()
    return split


def batches(split: DatasetSplit, batch_size: int, seed):
    """Infinite iterator over training batches.

    Each epoch is a fresh seeded permutation of the training set partitioned
    into consecutive batches (a shorter tail batch is kept when batch_size
    does not divide the set).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = split.n_train
    while True:
        order = rng.permutation(n)
        for k in range(0, n, batch_size):
            idx = order[k : k + batch_size]
            yield split.train_pixels[idx], split.train_labels[idx]


def one_hot(labels, classes=REDUCED_CLASSES):
    """One-hot targets; class order is ascending digit order."""
    classes = np.asarray(classes)
    idx = np.searchsorted(classes, labels)
    out = np.zeros((len(labels), len(classes)))
    out[np.arange(len(labels)), idx] = 1.0
    return out


def class_index(labels, classes=REDUCED_CLASSES):
    """Map digit labels to label-layer indices 0..4 (ascending digit order)."""
    return np.searchsorted(np.asarray(classes), labels)


# --- reduced-dataset cache ---------------------------------------------------


def save_reduced(split: DatasetSplit, path):
    split.validate()
    header = _CACHE_HEADER.pack(
        _CACHE_MAGIC,
        _CACHE_VERSION,
        len(split.classes),
        split.n_train,
        split.n_test,
        split.train_pixels.shape[1],
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(split.classes, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(split.train_pixels, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(split.train_labels, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(split.test_pixels, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(split.test_labels, dtype=np.uint8).tobytes())


def load_reduced(path) -> DatasetSplit:
    data = _read_file(path)
    if len(data) < _CACHE_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n_classes, n_train, n_test, n_pix = _CACHE_HEADER.unpack_from(data)
    if magic != _CACHE_MAGIC:
        raise DataError(f"{path}: not a reduced-dataset cache (bad magic {magic!r})")
    if version != _CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    need = (
        _CACHE_HEADER.size
        + n_classes
        + 4 * n_pix * (n_train + n_test)
        + n_train
        + n_test
    )
    if len(data) != need:
        raise DataError(f"{path}: truncated payload ({len(data)} bytes, expected {need})")
    off = _CACHE_HEADER.size
    classes = tuple(int(c) for c in np.frombuffer(data, np.uint8, n_classes, off))
    off += n_classes
    tr_pix = np.frombuffer(data, "<f4", n_train * n_pix, off).reshape(n_train, n_pix).copy()
    off += 4 * n_train * n_pix
    tr_lab = np.frombuffer(data, np.uint8, n_train, off).copy()
    off += n_train
    te_pix = np.frombuffer(data, "<f4", n_test * n_pix, off).reshape(n_test, n_pix).copy()
    off += 4 * n_test * n_pix
    te_lab = np.frombuffer(data, np.uint8, n_test, off).copy()
    split = DatasetSplit(tr_pix, tr_lab, te_pix, te_lab, classes)
    split.validate()
    return split
