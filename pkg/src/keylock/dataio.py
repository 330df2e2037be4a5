"""CIFAR-10 binary batches, training augmentation and adversary subsets."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
RECORDS_PER_FILE = 10000


@dataclass
class LabeledDataset:
    """Images ``(N, 3, 32, 32)`` in ``[0, 1]`` with aligned integer labels.

    ``indices`` records, for subsets, the row of each item in the dataset it
    was drawn from.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("label out of range")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = idx if self.indices is None else self.indices[idx]
        return LabeledDataset(self.images[idx], self.labels[idx], self.split, base)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)


def parse_records(raw: bytes, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split raw CIFAR-10 bytes into ``uint8`` pixel records and labels."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise ValueError(f"corrupt batch file: {name}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        raise ValueError(f"corrupt batch file: {name}")
    return rec[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_records`; float images are quantized to bytes."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = len(images)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(n, -1)
    return rec.tobytes()


def read_batch_file(path: str | os.PathLike, expected_records: int | None = RECORDS_PER_FILE):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if expected_records is not None and len(raw) != expected_records * RECORD_BYTES:
        raise ValueError(f"corrupt batch file: {path}")
    return parse_records(raw, str(path))


def _resolve(path: Path) -> Path:
    if (path / TEST_FILE).exists():
        return path
    nested = path / "cifar-10-batches-bin"
    if (nested / TEST_FILE).exists():
        return nested
    return path


def load_cifar10(path: str | os.PathLike, dtype=np.float32) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the binary CIFAR-10 distribution from a directory.

    ``path`` may be the ``cifar-10-batches-bin`` directory itself or its
    parent. Pixels are scaled to ``[0, 1]`` by dividing by 255.

    Raises:
        FileNotFoundError: a batch file is missing ("dataset not found").
        ValueError: a batch file has the wrong size ("corrupt batch file").
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset not found: {root}")
    root = _resolve(root)
    parts = [read_batch_file(root / name) for name in TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_batch_file(root / TEST_FILE)
    scale = np.dtype(dtype).type(255)
    return (LabeledDataset(train_x.astype(dtype) / scale, train_y, "train"),
            LabeledDataset(test_x.astype(dtype) / scale, test_y, "test"))


def write_cifar10(path: str | os.PathLike, train: LabeledDataset, test: LabeledDataset) -> Path:
    """Write datasets in the CIFAR-10 binary layout (train split over 5 files)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        (root / name).write_bytes(encode_records(train.images[idx], train.labels[idx]))
    (root / TEST_FILE).write_bytes(encode_records(test.images, test.labels))
    return root


# -- augmentation ---------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if self.crop > 32 + 2 * self.pad:
            raise ValueError("crop larger than padded image")


def crop_flip(x: np.ndarray, pad: int, dy: int, dx: int, flip: bool, crop: int | None = None) -> np.ndarray:
    """Zero-pad ``x`` by ``pad``, take the window at ``(dy, dx)``, optionally mirror it."""
    c, h, w = x.shape
    crop_h = h if crop is None else crop
    crop_w = w if crop is None else crop
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, pad:pad + h, pad:pad + w] = x
    out = padded[:, dy:dy + crop_h, dx:dx + crop_w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crop from the zero-padded image, then a random horizontal flip."""
    if not cfg.enabled:
        return x.copy()
    span = x.shape[1] + 2 * cfg.pad - cfg.crop
    dy, dx = rng.integers(0, span + 1, size=2)
    flip = bool(rng.random() < cfg.hflip_prob)
    return crop_flip(x, cfg.pad, int(dy), int(dx), flip, cfg.crop)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`augment` over an ``(N, c, h, w)`` batch.

    Draws per image: the two crop offsets, then the flip decision.
    """
    if not cfg.enabled:
        return images.copy()
    n, c, h, w = images.shape
    p = cfg.pad
    span = h + 2 * p - cfg.crop
    offsets = rng.integers(0, span + 1, size=(n, 2))
    flips = rng.random(n) < cfg.hflip_prob
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=images.dtype)
    padded[:, :, p:p + h, p:p + w] = images
    rows = offsets[:, 0, None] + np.arange(cfg.crop)          # (n, crop)
    cols = offsets[:, 1, None] + np.arange(cfg.crop)
    cols = np.where(flips[:, None], cols[:, ::-1], cols)
    nidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    return padded[nidx, cidx, rows[:, None, :, None], cols[:, None, None, :]]


# -- subsets --------------------------------------------------------------------

def sample_subset(d: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    """Uniform sample of ``size`` items without replacement (not stratified)."""
    if size < 0 or size > len(d):
        raise ValueError(f"subset size {size} outside [0, {len(d)}]")
    idx = np.random.default_rng(seed).permutation(len(d))[:size]
    return d.take(idx)


def write_manifest(path: str | os.PathLike, subset: LabeledDataset) -> None:
    """Newline-separated source indices of a sampled subset."""
    idx = subset.indices if subset.indices is not None else np.arange(len(subset))
    Path(path).write_text("".join(f"{i}\n" for i in idx.tolist()), encoding="ascii")


def read_manifest(path: str | os.PathLike) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii").split()
    return np.array([int(t) for t in text], dtype=np.int64)


# -- synthetic stand-in -------------------------------------------------------

def synthetic_cifar10(n_train: int, n_test: int, seed: int = 0,
                      noise: float = 0.08) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-structured 3x32x32 images in the CIFAR-10 layout.

    Each class is an oriented colour grating with a class-specific frequency
    and palette, randomly phased, shifted and noised. Useful for demos and
    tests when the real archive is unavailable; values are quantized to
    multiples of 1/255 like real CIFAR pixels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    angles = np.linspace(0, np.pi, NUM_CLASSES, endpoint=False)
    freqs = 0.25 + 0.12 * (np.arange(NUM_CLASSES) % 4)
    palettes = np.random.default_rng(12345).uniform(0.15, 0.85, size=(NUM_CLASSES, 2, 3))

    def chunk(labels: np.ndarray) -> np.ndarray:
        n = len(labels)
        theta = angles[labels] + rng.normal(0, 0.12, size=n)
        phase = rng.uniform(0, 2 * np.pi, size=n)
        u = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        t = 0.5 + 0.5 * np.sin(freqs[labels][:, None, None] * u + phase[:, None, None])
        lo = palettes[labels, 0][:, :, None, None]
        hi = palettes[labels, 1][:, :, None, None]
        img = (lo + (hi - lo) * t[:, None]).astype(np.float32)
        # a bright square at a random place breaks pure stationarity
        corner = rng.integers(0, 24, size=(n, 2))
        square = ((yy >= corner[:, 0, None, None]) & (yy < corner[:, 0, None, None] + 8) &
                  (xx >= corner[:, 1, None, None]) & (xx < corner[:, 1, None, None] + 8))
        img = np.where(square[:, None], 0.5 * img + 0.5, img)
        img += rng.normal(0, noise, size=img.shape).astype(np.float32)
        return np.rint(np.clip(img, 0, 1) * 255) / np.float32(255)

    def make(n: int, split: str) -> LabeledDataset:
        labels = np.arange(n) % NUM_CLASSES
        rng.shuffle(labels)
        images = np.empty((n, 3, 32, 32), dtype=np.float32)
        for i in range(0, n, 2000):
            images[i:i + 2000] = chunk(labels[i:i + 2000])
        return LabeledDataset(images, labels, split)

    return make(n_train, "train"), make(n_test, "test")
