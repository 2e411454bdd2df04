"""IDX image/label files, binarisation, and enumerable toy joints for oracle tests."""

from __future__ import annotations

import functools
import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mi_eval import DiscreteJoint, ToyVae

DATA_DIR_ENV = "VMIVAE_DATA_DIR"
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, D] in [0, 1]
    labels: np.ndarray | None = None
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            raise ValueError(f"images must be [N, D], got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.image_shape is None:
            side = math.isqrt(self.images.shape[1])
            if side * side == self.images.shape[1]:
                self.image_shape = (side, side)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx], self.image_shape)


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header (length {len(raw)} < 4)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated header (length {len(raw)} < {need})")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < need + count:
        raise IdxFormatError(f"{path}: truncated payload (length {len(raw)}, need {need + count})")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=need).reshape(dims)


def idx_load(images_path, labels_path=None) -> Dataset:
    """Read an IDX image file (and optional label file); gzip is detected transparently."""
    imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    n = imgs.shape[0]
    images = imgs.reshape(n, -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path).astype(np.int64)
    return Dataset(images, labels, (imgs.shape[1], imgs.shape[2]))


def idx_save(images_path, images: np.ndarray, labels_path=None, labels=None) -> None:
    """Write uint8 images [N, H, W] (and labels [N]) as IDX; a ``.gz`` suffix compresses."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be [N, H, W] uint8")

    def emit(path, magic, arr):
        payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(payload)

    emit(images_path, IMAGE_MAGIC, images)
    if labels_path is not None:
        emit(labels_path, LABEL_MAGIC, np.asarray(labels, dtype=np.uint8))


def binarize(ds: Dataset, mode: str = "threshold", threshold: float = 0.5, seed: int = 0) -> Dataset:
    """mode: "none", "threshold" (pixel >= threshold) or "stochastic" (Bernoulli(pixel) draw)."""
    if mode == "none":
        images = ds.images
    elif mode == "threshold":
        images = (ds.images >= threshold).astype(np.float64)
    elif mode == "stochastic":
        rng = np.random.default_rng(seed)
        images = (rng.random(ds.images.shape) < ds.images).astype(np.float64)
    else:
        raise ValueError(f"unknown binarisation mode {mode!r}")
    return Dataset(images, ds.labels, ds.image_shape)


def data_dir(override=None) -> Path | None:
    d = override or os.environ.get(DATA_DIR_ENV)
    return Path(d) if d else None


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def load_mnist(split: str = "train", directory=None, limit: int | None = None) -> Dataset:
    """MNIST-style IDX files from ``directory`` (or $VMIVAE_DATA_DIR).

    Falls back to the 5000-digit MNIST sample bundled with ``mlxtend`` when no
    IDX files are found: a fixed shuffle, then 4000 digits for ``train`` and
    the remaining 1000 for ``test``.
    """
    prefix = "train" if split == "train" else "t10k"
    d = data_dir(directory)
    if d is not None:
        img = _find(d, f"{prefix}-images-idx3-ubyte")
        lab = _find(d, f"{prefix}-labels-idx1-ubyte")
        if img is not None:
            ds = idx_load(img, lab)
            return ds.subset(slice(0, limit)) if limit else ds
    ds = mnist_sample()
    ds = ds.subset(slice(0, SAMPLE_TRAIN)) if split == "train" else ds.subset(slice(SAMPLE_TRAIN, None))
    return ds.subset(slice(0, limit)) if limit else ds


SAMPLE_TRAIN = 4000


def mnist_sample() -> Dataset:
    x, y = _mnist_sample_arrays()
    return Dataset(x.copy(), y.copy(), (28, 28))


@functools.lru_cache(maxsize=1)
def _mnist_sample_arrays() -> tuple[np.ndarray, np.ndarray]:
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise FileNotFoundError(
            f"no MNIST IDX files found (set ${DATA_DIR_ENV}) and mlxtend is not installed for the bundled sample"
        ) from exc
    x, y = mnist_data()
    perm = np.random.default_rng(0).permutation(len(x))
    return x[perm] / 255.0, y[perm].astype(np.int64)


# ---------------------------------------------------------------------------
# toy joints
# ---------------------------------------------------------------------------


def make_toy_joint(kind: str, seed: int = 0, k: int = 4, eps: float = 0.1) -> tuple[DiscreteJoint, ToyVae]:
    """Enumerable joint p(x, z) over K x K states plus the matching discrete "VAE".

    kinds: ``independent`` (random marginals, product coupling), ``identity``
    (x = z, uniform) and ``noisy_channel`` (z uniform, x = z with probability
    1 - eps, otherwise one of the other K - 1 values uniformly).
    """
    rng = np.random.default_rng(seed)
    if kind == "independent":
        px = rng.dirichlet(np.ones(k))
        pz = rng.dirichlet(np.ones(k))
        table = np.outer(px, pz)
    elif kind == "identity":
        table = np.eye(k) / k
    elif kind == "noisy_channel":
        flip = np.full((k, k), eps / (k - 1))
        np.fill_diagonal(flip, 1.0 - eps)
        table = flip / k
    else:
        raise ValueError(f"unknown toy kind {kind!r}")
    joint = DiscreteJoint(table)
    return joint, ToyVae.from_joint(joint)
