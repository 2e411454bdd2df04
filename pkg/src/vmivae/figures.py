"""Latent traversal grids written as binary PGM images."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .models import VaeModel, decode, encode
from .tensor import no_grad


def to_pixels(means: np.ndarray) -> np.ndarray:
    """Decoder means in [0, 1] -> uint8 via round(255 * mean), halves rounded up."""
    return np.floor(255.0 * np.clip(means, 0.0, 1.0) + 0.5).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def tile(tiles: np.ndarray) -> np.ndarray:
    """[rows, cols, H, W] uint8 tiles -> one [rows*H, cols*W] image, no gutters."""
    r, c, h, w = tiles.shape
    return tiles.transpose(0, 2, 1, 3).reshape(r * h, c * w)


def _anchor_code(model: VaeModel, x: np.ndarray):
    """Posterior mean of z and argmax one-hot of c for each row of x."""
    with no_grad():
        gauss, cat = encode(model, x)
    z = gauss.mu.data.copy() if gauss is not None else None
    c = None
    if cat is not None:
        c = np.eye(model.layout.categorical_k)[cat.logits.data.argmax(axis=1)]
    return z, c


def _decode_means(model: VaeModel, z, c) -> np.ndarray:
    with no_grad():
        return decode(model, z, c).data


def traverse(
    model: VaeModel,
    anchor: np.ndarray,
    indices: Sequence[int],
    lo: float = -3.0,
    hi: float = 3.0,
    steps: int = 7,
    image_shape: tuple[int, int] = (28, 28),
) -> np.ndarray:
    """Sweep one or two Gaussian coordinates of the anchor's code over [lo, hi].

    One index gives a 1 x steps strip; two give a steps x steps grid with the
    first index varying down rows and the second across columns, both ascending.
    ``steps == 1`` leaves the code untouched, i.e. reconstructs the anchor.
    """
    g = model.layout.gaussian_dim
    indices = list(indices)
    if not 1 <= len(indices) <= 2:
        raise ValueError("traverse takes one or two Gaussian indices")
    for i in indices:
        if not 0 <= i < g:
            raise IndexError(f"Gaussian index {i} outside layout of size {g}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z0, c0 = _anchor_code(model, np.asarray(anchor, dtype=np.float64).reshape(1, -1))
    grid = np.linspace(lo, hi, steps)
    rows = steps if len(indices) == 2 else 1
    z = np.repeat(z0, rows * steps, axis=0)
    if steps > 1:
        r, col = np.divmod(np.arange(rows * steps), steps)
        if len(indices) == 2:
            z[:, indices[0]] = grid[r]
            z[:, indices[1]] = grid[col]
        else:
            z[:, indices[0]] = grid[col]
    c = None if c0 is None else np.repeat(c0, rows * steps, axis=0)
    means = _decode_means(model, z, c)
    return tile(to_pixels(means).reshape(rows, steps, *image_shape))


def cat_traverse(model: VaeModel, anchors: np.ndarray, image_shape: tuple[int, int] = (28, 28), separator: int = 255) -> np.ndarray:
    """Per anchor row: the original image, a separator tile, then one decode per one-hot category.

    The Gaussian code stays at the anchor's posterior mean.
    """
    k = model.layout.categorical_k
    if k < 2:
        raise ValueError("model has no categorical latent")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, model.data_dim)
    n = len(anchors)
    z0, _ = _anchor_code(model, anchors)
    z = None if z0 is None else np.repeat(z0, k, axis=0)
    c = np.tile(np.eye(k), (n, 1))
    decoded = to_pixels(_decode_means(model, z, c)).reshape(n, k, *image_shape)
    original = to_pixels(anchors).reshape(n, 1, *image_shape)
    sep = np.full((n, 1, *image_shape), separator, dtype=np.uint8)
    return tile(np.concatenate([original, sep, decoded], axis=1))
