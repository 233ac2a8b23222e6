"""Dataset ingestion (IDX and CIFAR binary formats) and batch preparation.

Also ships a deterministic synthetic digit corpus writer: it renders jittered
glyph bitmaps into genuine IDX files, so the full ingestion path can be
exercised (and desk-scale training demonstrated) on machines that do not have
the real corpora on disk. Point the loaders at real MNIST/CIFAR files when
available; the formats are identical.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixels


class DatasetError(ValueError):
    """Malformed dataset file (bad magic, truncation, bad labels)."""


@dataclass(frozen=True)
class Stats:
    mean: np.ndarray  # per channel
    std: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Images as float32 (N, C, H, W); integer labels; optional norm stats."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    stats: Stats | None = None
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"image/label count mismatch: {self.images.shape[0]} vs {self.labels.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, count: int) -> "Dataset":
        return replace(self, images=self.images[:count], labels=self.labels[:count])

    def normalized(self, stats: Stats | None = None) -> "Dataset":
        """Zero-mean unit-variance per channel; pass train-split stats in for
        a val split so both share the same transform."""
        if stats is None:
            mean = self.images.mean(axis=(0, 2, 3))
            std = self.images.std(axis=(0, 2, 3))
            std = np.where(std < 1e-8, 1.0, std)
            stats = Stats(mean=mean, std=std)
        images = (self.images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
        return replace(self, images=images.astype(np.float32), stats=stats)


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, path, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise DatasetError(
            f"{path}: truncated {what}: expected {count} bytes, got {len(buf)}"
        )
    return buf


def load_idx_images(path) -> np.ndarray:
    """Big-endian IDX image file (magic 0x00000803) -> uint8 (N, H, W)."""
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, path, "header"))
        if magic != IDX_MAGIC_IMAGES:
            raise DatasetError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_MAGIC_IMAGES:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, path, "dims"))
        raw = _read_exact(fh, n * rows * cols, path, "pixel data")
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes after {n} images")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path, num_classes: int = 10) -> np.ndarray:
    """Big-endian IDX label file (magic 0x00000801) -> int64 (N,)."""
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, path, "header"))
        if magic != IDX_MAGIC_LABELS:
            raise DatasetError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_MAGIC_LABELS:08x}"
            )
        n, = struct.unpack(">I", _read_exact(fh, 4, path, "count"))
        raw = _read_exact(fh, n, path, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"{path}: label {labels.max()} out of range [0, {num_classes})")
    return labels


def load_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """CIFAR-10 binary batch: 3073-byte records -> (uint8 (N,3,32,32), labels)."""
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if not raw or len(raw) % CIFAR_RECORD_BYTES:
        raise DatasetError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}-byte records"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label {labels.max()} out of range [0, 10)")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "val": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_file(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise DatasetError(f"{directory}: missing {stem}[.gz]")


def ingest(path, fmt: str = "IDX", split: str = "train") -> Dataset:
    """Load one split from a dataset directory; pixels scaled to [0, 1].

    fmt="IDX" expects the conventional MNIST-style file names; fmt="CIFAR"
    expects data_batch_*.bin (train) and test_batch.bin (val).
    """
    directory = Path(path)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a directory")
    if split not in ("train", "val"):
        raise DatasetError(f"unknown split {split!r}")
    if fmt.upper() == "IDX":
        img_name, lbl_name = _IDX_NAMES[split]
        images = load_idx_images(_find_file(directory, img_name))
        labels = load_idx_labels(_find_file(directory, lbl_name))
        images = images[:, None, :, :]  # single channel
    elif fmt.upper().startswith("CIFAR"):
        if split == "train":
            paths = sorted(directory.glob("data_batch_*.bin"))
            if not paths:
                raise DatasetError(f"{directory}: no data_batch_*.bin files")
        else:
            paths = [_find_file(directory, "test_batch.bin")]
        parts = [load_cifar_batch(p) for p in paths]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")
    return Dataset(
        images=(images.astype(np.float32) / 255.0), labels=labels, split=split
    )


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, labels.size))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic digit corpus

_GLYPHS = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00010 00100 01000 11111",
    "11111 00010 00100 00010 00001 10001 01110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "00110 01000 10000 11110 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00010 01100",
]


def _glyph_bitmaps(scale: int = 3) -> np.ndarray:
    glyphs = []
    for spec in _GLYPHS:
        rows = [[int(c) for c in row] for row in spec.split()]
        g = np.array(rows, dtype=np.float32)
        glyphs.append(np.kron(g, np.ones((scale, scale), dtype=np.float32)))
    return np.stack(glyphs)  # (10, 21, 15)


def make_digit_corpus(count: int, seed: int = 0, *, noise: float = 0.12,
                      size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Render a balanced, jittered digit classification corpus.

    Each sample is a glyph placed at a random offset with random intensity,
    plus Gaussian pixel noise. Returns (uint8 images (count, size, size),
    uint8 labels). Fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    glyphs = _glyph_bitmaps()
    gh, gw = glyphs.shape[1:]
    labels = rng.integers(0, 10, size=count).astype(np.uint8)
    images = np.zeros((count, size, size), dtype=np.float32)
    ys = rng.integers(0, size - gh + 1, size=count)
    xs = rng.integers(0, size - gw + 1, size=count)
    intensity = rng.uniform(0.6, 1.0, size=count)
    for i in range(count):
        images[i, ys[i]:ys[i] + gh, xs[i]:xs[i] + gw] = glyphs[labels[i]] * intensity[i]
    images += rng.normal(0.0, noise, size=images.shape)
    return (np.clip(images, 0.0, 1.0) * 255).astype(np.uint8), labels


def write_digit_corpus(directory, n_train: int = 10000, n_val: int = 2000,
                       seed: int = 0, noise: float = 0.12) -> None:
    """Write the synthetic corpus as MNIST-style IDX files into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr_img, tr_lbl = make_digit_corpus(n_train, seed=seed, noise=noise)
    va_img, va_lbl = make_digit_corpus(n_val, seed=seed + 1, noise=noise)
    write_idx_images(directory / "train-images-idx3-ubyte", tr_img)
    write_idx_labels(directory / "train-labels-idx1-ubyte", tr_lbl)
    write_idx_images(directory / "t10k-images-idx3-ubyte", va_img)
    write_idx_labels(directory / "t10k-labels-idx1-ubyte", va_lbl)
