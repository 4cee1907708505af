"""Dataset containers, IDX image/label ingestion, and synthetic generators."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .rng import SeededRng

IDX_DTYPE_UBYTE = 0x08
IMAGE_MAGIC = 2051  # 0x00000803: unsigned byte payload, 3 dimensions
LABEL_MAGIC = 2049  # 0x00000801: unsigned byte payload, 1 dimension


class IdxFormatError(ValueError):
    """IDX file violates the format; the message names the byte offset."""


@dataclass(frozen=True)
class Dataset:
    """n samples in [0,1]^d with optional labels and image-shape metadata."""

    features: np.ndarray
    labels: np.ndarray | None = None
    image_shape: tuple[int, int, int] | None = None
    name: str = "dataset"

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValueError("feature entries must lie in [0, 1]")
        object.__setattr__(self, "features", f)
        if self.labels is not None:
            y = np.ascontiguousarray(self.labels, dtype=np.int64)
            if y.shape != (f.shape[0],):
                raise ValueError(
                    f"labels must have shape ({f.shape[0]},), got {y.shape}"
                )
            if y.size and y.min() < 0:
                raise ValueError("labels must be nonnegative class indices")
            object.__setattr__(self, "labels", y)
        if self.image_shape is not None:
            h, w, c = self.image_shape
            if h * w * c != f.shape[1]:
                raise ValueError(
                    f"image_shape {self.image_shape} is inconsistent with d={f.shape[1]}"
                )
            object.__setattr__(self, "image_shape", (int(h), int(w), int(c)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = self.labels[idx] if self.labels is not None else None
        return replace(self, features=self.features[idx], labels=labels)


def _read_file(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, path) -> tuple[list[int], bytes]:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset 0 ({len(raw)} bytes total)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: magic {magic} at byte offset 0, expected {expected_magic}"
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension table at byte offset {len(raw)}")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header_end]))
    payload = math.prod(dims)
    if len(raw) != header_end + payload:
        raise IdxFormatError(
            f"{path}: payload of {len(raw) - header_end} bytes at byte offset {header_end} "
            f"disagrees with declared size {payload}"
        )
    return dims, raw[header_end:]


def load_idx_images(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Load an IDX image file as an n-by-d matrix scaled to [0,1].

    Pixels are divided by 255 so that perturbation budgets expressed in
    pixel units (e.g. 8/255) live in the same scale as the features.
    """
    dims, payload = _parse_idx(_read_file(path), IMAGE_MAGIC, path)
    n, rows, cols = dims
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float64) / 255.0, (rows, cols, 1)


def load_idx_labels(path) -> np.ndarray:
    dims, payload = _parse_idx(_read_file(path), LABEL_MAGIC, path)
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def save_idx_images(path, pixels: np.ndarray) -> None:
    """Write uint8 images of shape (n, rows, cols) in IDX image format."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())


def save_idx_labels(path, labels) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_dataset(images_path, labels_path=None, name: str | None = None) -> Dataset:
    features, image_shape = load_idx_images(images_path)
    labels = load_idx_labels(labels_path) if labels_path else None
    if labels is not None and labels.shape[0] != features.shape[0]:
        raise IdxFormatError(
            f"{labels_path}: {labels.shape[0]} labels for {features.shape[0]} images"
        )
    return Dataset(features, labels, image_shape, name or str(images_path))


def synth_linear_dataset(rng: SeededRng, n: int, d: int, w, b: float,
                         name: str = "synth-linear") -> Dataset:
    """Uniform features in [0,1]^d labeled by the sign of w . x + b."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    w = np.asarray(w, dtype=np.float64)
    x = rng.uniform(0.0, 1.0, (n, d))
    labels = (x @ w + b > 0).astype(np.int64)
    return Dataset(x, labels, None, name)


def split(dataset: Dataset, fraction: float, rng: SeededRng) -> tuple[Dataset, Dataset]:
    """Disjoint row partition of sizes (ceil(fraction*n), remainder)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if dataset.n == 0:
        raise ValueError("cannot split an empty dataset")
    perm = rng.permutation(dataset.n)
    head = math.ceil(fraction * dataset.n)
    a = dataset.take(perm[:head])
    b = dataset.take(perm[head:])
    return (replace(a, name=f"{dataset.name}[a]"), replace(b, name=f"{dataset.name}[b]"))


# 7x5 glyph bitmaps for the self-contained digit dataset used when no IDX
# corpus is mounted. Each string row is one scanline, "1" marks ink.
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit: int, scale: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    base = np.array([[c == "1" for c in row] for row in rows], dtype=np.float64)
    return np.kron(base, np.ones((scale, scale)))


def synth_digits_dataset(rng: SeededRng, n: int, image_size: int = 28,
                         noise_stddev: float = 0.25,
                         contrast: tuple[float, float] = (0.35, 0.75),
                         name: str = "synth-digits") -> Dataset:
    """Procedurally rendered digit glyphs: jittered position, contrast, noise.

    A stand-in classification corpus for desk-scale studies when no IDX
    image files are available. Contrast is kept low and noise high so that
    small pixel-budget attacks measurably degrade an undefended model.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    scale = 3
    glyphs = [_glyph_array(k, scale) for k in range(10)]
    gh, gw = glyphs[0].shape
    if image_size < max(gh, gw):
        raise ValueError(f"image_size must be at least {max(gh, gw)}")
    labels = rng.integers(0, 10, n)
    images = np.zeros((n, image_size, image_size))
    max_r = image_size - gh
    max_c = image_size - gw
    offsets_r = rng.integers(0, max_r + 1, n)
    offsets_c = rng.integers(0, max_c + 1, n)
    scales = rng.uniform(contrast[0], contrast[1], n)
    for i in range(n):
        r, c = offsets_r[i], offsets_c[i]
        images[i, r:r + gh, c:c + gw] = glyphs[labels[i]] * scales[i]
    images += noise_stddev * rng.standard_normal(images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(
        images.reshape(n, image_size * image_size),
        labels,
        (image_size, image_size, 1),
        name,
    )
