"""Block-wise pixel shuffling of image tensors.

Images are numpy arrays of shape ``(c, h, w)`` (channel-major, then
row-major) with values in ``[0, 1]``; batches are ``(N, c, h, w)``.

Each ``M x M`` block is flattened to a vector of length ``c*M*M`` with
:func:`block_vector_index` (channel, then in-block row, then in-block
column). That vector is permuted with one shared permutation,
``out[k] = in[p.map[k]]``, and written back in place of the block.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .keycore import Permutation, SecretKey, derive_permutation, invert, key_space_size


@dataclass(frozen=True)
class ShuffleConfig:
    block_size: int
    channels: int = 3

    def __post_init__(self):
        if self.block_size < 1 or self.channels < 1:
            raise ValueError("block size and channel count must be >= 1")

    @property
    def vector_length(self) -> int:
        return self.channels * self.block_size * self.block_size

    def key_space(self) -> int:
        return key_space_size(self.channels, self.block_size)

    def permutation(self, key: SecretKey) -> Permutation:
        return derive_permutation(key, self.vector_length)


def block_vector_index(ch: int, row: int, col: int, block_size: int,
                       channels: int | None = None) -> int:
    """Position of pixel ``(ch, row, col)`` of a block in its flattened vector."""
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    if not (0 <= row < block_size and 0 <= col < block_size):
        raise IndexError("in-block coordinate out of range")
    if ch < 0 or (channels is not None and ch >= channels):
        raise IndexError("channel out of range")
    return ch * block_size * block_size + row * block_size + col


def validate_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a (c, h, w) image, got shape {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return x


def _check(shape: tuple[int, int, int], cfg: ShuffleConfig, p: Permutation) -> None:
    c, h, w = shape
    if c != cfg.channels:
        raise ValueError(f"image has {c} channels, config expects {cfg.channels}")
    if h % cfg.block_size or w % cfg.block_size:
        raise ValueError("block size does not divide image")
    if p.n != cfg.vector_length:
        raise ValueError("permutation length mismatch")


@lru_cache(maxsize=64)
def _gather_index(shape: tuple[int, int, int], block_size: int, p: Permutation) -> np.ndarray:
    """Flat index ``g`` such that ``shuffled.ravel() == x.ravel()[g]``."""
    c, h, w = shape
    m = block_size
    # position of every pixel, arranged as (block row, block col, block vector)
    pos = np.arange(c * h * w).reshape(c, h // m, m, w // m, m)
    vec = pos.transpose(1, 3, 0, 2, 4).reshape(h // m, w // m, c * m * m)
    src = vec[..., p.map]
    # scatter source positions back to the layout of the output image
    g = np.empty(c * h * w, dtype=np.intp)
    g[vec.ravel()] = src.ravel()
    g.setflags(write=False)
    return g


def shuffle_batch(batch, cfg: ShuffleConfig, p: Permutation, check: bool = True) -> np.ndarray:
    """Shuffle every image of an ``(N, c, h, w)`` batch with the same permutation.

    A list of equally-shaped images is accepted too. ``check=False`` skips
    the value-range scan, which the training pipeline does not need.
    """
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        batch = list(batch)
        if not batch:
            return np.empty((0, cfg.channels, 0, 0))
        shapes = {np.shape(img) for img in batch}
        if len(shapes) != 1:
            raise ValueError("heterogeneous image shapes in batch")
        arr = np.stack(batch)
    if arr.ndim != 4:
        raise ValueError(f"expected an (N, c, h, w) batch, got shape {arr.shape}")
    shape = tuple(arr.shape[1:])
    _check(shape, cfg, p)
    if len(arr) == 0:
        return arr.copy()
    if check and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    g = _gather_index(shape, cfg.block_size, p)
    flat = arr.reshape(len(arr), -1)
    return np.take(flat, g, axis=1).reshape(arr.shape)


def unshuffle_batch(batch, cfg: ShuffleConfig, p: Permutation, check: bool = True) -> np.ndarray:
    return shuffle_batch(batch, cfg, invert(p), check=check)


def shuffle_image(x: np.ndarray, cfg: ShuffleConfig, p: Permutation) -> np.ndarray:
    """Shuffle one ``(c, h, w)`` image; the input is left untouched."""
    x = validate_image(x)
    return shuffle_batch(x[None], cfg, p)[0]


def unshuffle_image(x: np.ndarray, cfg: ShuffleConfig, p: Permutation) -> np.ndarray:
    """Inverse of :func:`shuffle_image` for the same ``cfg`` and ``p``."""
    x = validate_image(x)
    return shuffle_batch(x[None], cfg, invert(p))[0]


def shuffle_reference(x: np.ndarray, cfg: ShuffleConfig, p: Permutation) -> np.ndarray:
    """Direct loop over blocks, channels, rows and columns. Slow; for testing.

    Accepts one ``(c, h, w)`` image or a batch ``(N, c, h, w)``; with a batch
    each loop step moves one pixel position across all images at once.
    """
    c, h, w = x.shape[-3:]
    _check((c, h, w), cfg, p)
    m = cfg.block_size
    out = np.empty_like(x)
    mp = p.map.tolist()
    for bi in range(h // m):
        for bj in range(w // m):
            b = [None] * cfg.vector_length
            for ch in range(c):
                for r in range(m):
                    for col in range(m):
                        b[block_vector_index(ch, r, col, m)] = x[..., ch, bi * m + r, bj * m + col]
            for ch in range(c):
                for r in range(m):
                    for col in range(m):
                        k = block_vector_index(ch, r, col, m)
                        out[..., ch, bi * m + r, bj * m + col] = b[mp[k]]
    return out


def position_change_fraction(p: Permutation, q: Permutation,
                             shape: tuple[int, int, int], block_size: int) -> float:
    """Fraction of pixel positions that receive a different source pixel under ``p`` and ``q``."""
    gp = _gather_index(tuple(shape), block_size, p)
    gq = _gather_index(tuple(shape), block_size, q)
    return float(np.mean(gp != gq))


# -- PPM (P6 / P5) image files ------------------------------------------------

def to_bytes(x: np.ndarray) -> np.ndarray:
    """Quantize ``[0, 1]`` values to ``uint8``, rounding half to even."""
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | os.PathLike, x: np.ndarray) -> None:
    """Write a ``(3, h, w)`` image as binary PPM (or ``(1, h, w)`` as PGM)."""
    x = validate_image(x)
    c, h, w = x.shape
    if c not in (1, 3):
        raise ValueError("PPM export supports 1 or 3 channels")
    magic = b"P6" if c == 3 else b"P5"
    pixels = to_bytes(x).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM/PGM with maxval 255 into a ``(c, h, w)`` float array."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        while raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while raw[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    i += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise ValueError(f"unsupported PPM file: {path}")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=c * h * w, offset=i)
    return data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def shuffle_files(paths: Sequence[Path], out_dir: Path, cfg: ShuffleConfig,
                  p: Permutation, inverse: bool = False) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    perm = invert(p) if inverse else p
    for path in paths:
        x = read_ppm(path)
        y = shuffle_batch(x[None], cfg, perm)[0]
        target = out_dir / path.name
        write_ppm(target, y)
        written.append(target)
    return written
