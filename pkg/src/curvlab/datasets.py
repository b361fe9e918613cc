"""Dataset ingestion (IDX files) and synthetic 2-D benchmarks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from curvlab.errors import BadMagic, CountMismatch, DataEmpty, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH_KINDS = ("two-moons", "gaussians", "checkerboard")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    input_range: tuple = (0.0, 1.0)
    num_classes: int = 2

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise CountMismatch(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.input_range, self.num_classes)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    # indices into the source dataset, kept to check disjointness
    indices: dict


def split_dataset(ds: Dataset, fractions=(0.45, 0.05, 0.5), seed: int = 0) -> Splits:
    """Random disjoint train/val/test partition covering the whole dataset."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    if n == 0:
        raise DataEmpty("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }
    return Splits(ds.subset(parts["train"]), ds.subset(parts["val"]), ds.subset(parts["test"]), parts)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_header(data: bytes, magic: int, ndims: int, path) -> tuple:
    need = 4 * (1 + ndims)
    if len(data) >= 4:
        found = struct.unpack(">I", data[:4])[0]
        if found != magic:
            raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(data) < need:
        raise TruncatedFile(f"{path}: header needs {need} bytes, file has {len(data)}")
    return struct.unpack(">" + "I" * ndims, data[4:need]), need


def load_idx(images_path, labels_path) -> Dataset:
    """IDX image/label pair; pixels are scaled from bytes to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    (count, rows, cols), off = _read_header(img, IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,), loff = _read_header(lab, IDX_LABELS_MAGIC, 1, labels_path)
    if count != n_labels:
        raise CountMismatch(f"{count} images but {n_labels} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=off)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=loff)
    if pixels.size < count * rows * cols:
        raise TruncatedFile(f"{images_path}: expected {count * rows * cols} pixel bytes, found {pixels.size}")
    if labels.size < count:
        raise TruncatedFile(f"{labels_path}: expected {count} label bytes, found {labels.size}")
    x = pixels[: count * rows * cols].reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    y = labels[:count].astype(np.int64)
    return Dataset(x, y, (0.0, 1.0), int(y.max()) + 1 if count else 0)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def binary_subset(ds: Dataset, classes=(0, 1), n: int | None = None, seed: int = 0) -> Dataset:
    """Keep two classes (relabelled 0/1), optionally a balanced random subset of size n."""
    keep = [np.flatnonzero(ds.y == c) for c in classes]
    rng = np.random.default_rng(seed)
    if n is not None:
        per = [n // 2, n - n // 2]
        keep = [np.sort(rng.choice(k, size=min(p, len(k)), replace=False)) for k, p in zip(keep, per)]
    idx = np.concatenate(keep)
    y = np.concatenate([np.full(len(k), i) for i, k in enumerate(keep)])
    return Dataset(ds.x[idx], y, ds.input_range, 2)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = (x - lo) / span
    out[:, hi <= lo] = 0.5
    return np.clip(out, 0.0, 1.0)


def synth_dataset(kind: str, n: int, noise: float = 0.1, seed: int = 0, extra_dims: int = 0) -> Dataset:
    """Balanced 2-class 2-D data scaled into the unit square.

    ``extra_dims`` appends that many U(0, 1) columns carrying no label
    information, which gives a wide network room to memorise.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    if extra_dims < 0:
        raise ValueError("extra_dims must be non-negative")
    rng = np.random.default_rng(seed)
    n0, n1 = n // 2, n - n // 2
    if kind == "two-moons":
        t0 = rng.uniform(0.0, np.pi, n0)
        t1 = rng.uniform(0.0, np.pi, n1)
        a = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        b = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x = np.concatenate([a, b]) + noise * rng.standard_normal((n, 2))
        x = _minmax(x)
    elif kind == "gaussians":
        a = np.array([-1.0, -1.0]) + noise * rng.standard_normal((n0, 2))
        b = np.array([1.0, 1.0]) + noise * rng.standard_normal((n1, 2))
        x = _minmax(np.concatenate([a, b]))
    elif kind == "checkerboard":
        pts = {0: [], 1: []}
        need = {0: n0, 1: n1}
        while len(pts[0]) < n0 or len(pts[1]) < n1:
            p = rng.uniform(0.0, 1.0, size=(n, 2))
            lab = (np.floor(4 * p[:, 0]) + np.floor(4 * p[:, 1])).astype(int) % 2
            for c in (0, 1):
                room = need[c] - len(pts[c])
                if room > 0:
                    pts[c].extend(p[lab == c][:room])
        x = np.concatenate([np.array(pts[0]), np.array(pts[1])])
        x = np.clip(x + noise * rng.standard_normal(x.shape), 0.0, 1.0)
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}; choose from {SYNTH_KINDS}")
    if extra_dims:
        x = np.hstack([x, rng.uniform(0.0, 1.0, size=(n, extra_dims))])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return Dataset(x, y, (0.0, 1.0), 2)


# ---------------------------------------------------------------------------
# bundled 8x8 digits
# ---------------------------------------------------------------------------


def digits_dataset(threshold: int = 5) -> Dataset:
    """The 1797-image 8x8 handwritten digits set shipped with scikit-learn,
    as a two-class problem: label 1 when the digit is >= ``threshold``.

    Pixel intensities 0..16 are scaled to [0, 1]; images are flattened to 64
    features.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    x = d.data.astype(np.float64) / 16.0
    y = (d.target >= threshold).astype(np.int64)
    return Dataset(x, y, (0.0, 1.0), 2)
