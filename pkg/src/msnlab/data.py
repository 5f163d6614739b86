"""MNIST IDX parsing, stratified subsets, minibatching and the 8-Gaussian ring."""

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CountMismatchError, FormatError, TruncatedFileError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
RING_CENTERS = 8
RING_RADIUS = 1.0
RING_STD = 0.05

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray = None  # (N,) int64, None for unlabeled data
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.images):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    def take(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, dict(self.meta))


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw, expected_magic, path="<bytes>"):
    """Return ``(dims, payload)`` of an unsigned-byte IDX blob."""
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} (bytes {raw[:4].hex(' ')}), "
                          f"expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise TruncatedFileError(f"{path}: payload needs {need} bytes for dims {dims}, found {len(body)}")
    return dims, np.frombuffer(body, dtype=np.uint8, count=need)


def load_idx(images_path, labels_path):
    """Load an image/label IDX pair (plain or gzip) into a :class:`Dataset`."""
    dims, pix = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    if len(dims) != 3:
        raise FormatError(f"{images_path}: expected 3 image dims, got {dims}")
    n, h, w = dims
    ldims, lab = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if ldims[0] != n:
        raise CountMismatchError(f"{images_path} has {n} images but {labels_path} has {ldims[0]} labels")
    images = pix.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(images, lab.astype(np.int64), {"source": os.fspath(images_path)})


def idx_bytes(dataset):
    """Serialize ``dataset`` to ``(images_bytes, labels_bytes)`` in IDX layout."""
    n, _, h, w = dataset.images.shape
    pix = np.rint(dataset.images * 255.0).clip(0, 255).astype(np.uint8)
    images = struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pix.tobytes()
    labels = struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def write_idx(dataset, images_path, labels_path, compress=None):
    images, labels = idx_bytes(dataset)
    for path, blob in ((images_path, images), (labels_path, labels)):
        gz = compress if compress is not None else os.fspath(path).endswith(".gz")
        with open(path, "wb") as f:
            f.write(gzip.compress(blob, mtime=0) if gz else blob)


def _find(data_dir, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {data_dir}")


def resolve_data_dir(data_dir=None):
    data_dir = data_dir or os.environ.get("MSNLAB_DATA_DIR")
    if not data_dir:
        raise ArgumentError("no data directory: pass --data-dir or set MSNLAB_DATA_DIR")
    return data_dir


def load_mnist(data_dir=None, split="train"):
    data_dir = resolve_data_dir(data_dir)
    img, lab = MNIST_FILES[split]
    ds = load_idx(_find(data_dir, img), _find(data_dir, lab))
    ds.meta["split"] = split
    return ds


def subset(ds, n, seed=0, num_classes=10):
    """Class-stratified sample of size ``n``; per-class counts differ by at most one.

    Classes are visited round-robin in a seeded order, each drawing from its
    own seeded permutation, and the result is shuffled once more.
    """
    if n < num_classes:
        raise ArgumentError(f"subset size {n} is smaller than the number of classes ({num_classes})")
    if n > len(ds):
        raise ArgumentError(f"subset size {n} exceeds dataset size {len(ds)}")
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(num_classes)]
    order = rng.permutation(num_classes)
    picked = []
    depth = 0
    while len(picked) < n:
        for c in order:
            if len(picked) == n:
                break
            if depth < len(pools[c]):
                picked.append(pools[c][depth])
        depth += 1
    idx = np.array(picked, dtype=np.int64)[rng.permutation(len(picked))]
    out = ds.take(idx)
    out.meta["subset_indices"] = idx
    return out


def batches(n, batch_size, seed, epoch):
    """Index arrays for one epoch; the shuffle is derived from ``(seed, epoch)``."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        # a lone trailing sample would break batch statistics
        out[-2:] = [np.concatenate(out[-2:])]
    return out


def ring_centers():
    angles = 2 * np.pi * np.arange(RING_CENTERS) / RING_CENTERS
    return RING_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_ring(n, seed, rng=None):
    """``n`` points from an equal-weight mixture of 8 Gaussians on the unit circle."""
    if n < 1:
        raise ArgumentError(f"sample_ring needs n >= 1, got {n}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    which = rng.integers(0, RING_CENTERS, size=n)
    return ring_centers()[which] + RING_STD * rng.standard_normal((n, 2))
