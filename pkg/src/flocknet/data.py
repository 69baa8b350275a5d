"""Dataset pipeline: ingestion, split, resize, records, augmentation.

Images rest as 8-bit [H, W, 3] arrays and are scaled to [0, 1] floats only
when batched. Datasets serialize to a checksummed binary record format so a
split can be rebuilt bit-exactly, and a synthetic corpus generator provides a
small stand-in corpus for end-to-end runs.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import DTYPE

log = logging.getLogger(__name__)

RECORD_MAGIC = b"EFRC"
RECORD_VERSION = 1
DEFAULT_IMAGE_SIZE = 224
SPLIT_FRACTIONS = (0.64, 0.16, 0.20)
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class CorruptRecordError(ValueError):
    """A record file failed checksum or structural validation."""


@dataclass
class LabeledImage:
    """An 8-bit [H, W, 3] image with a binary class label."""

    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be [H, W, 3], got {self.pixels.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


def _one_hot(labels: Sequence[int], k: int = 2) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=np.uint8)
    out[np.arange(len(labels)), list(labels)] = 1
    return out


def dataset_checksum(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<4I", *images.shape))
    h.update(images.tobytes())
    h.update(labels.tobytes())
    return h.hexdigest()


@dataclass
class RecordDataset:
    """Ordered images and one-hot labels for one split, checksummed."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""
    checksum: str = field(default="")

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, H, W, C], got {self.images.shape}")
        if self.labels.ndim != 2 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError(
                f"labels of shape {self.labels.shape} do not match {self.images.shape[0]} images")
        onehot = np.isin(self.labels, (0, 1)).all() and (self.labels.sum(axis=1) == 1).all()
        if self.labels.size and not onehot:
            raise ValueError("labels must be one-hot rows")
        if not self.checksum:
            self.checksum = dataset_checksum(self.images, self.labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Batch view: pixels scaled to [0, 1], labels as floats."""
        return (self.images.astype(DTYPE) / 255.0, self.labels.astype(DTYPE))


# ---------------------------------------------------------------------------
# ingestion

def _decode_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        # "RGB" replicates single-channel sources across all three channels
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr


def _ingest_class(directory, label: int, on_error: str) -> list[LabeledImage]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    out = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in _IMAGE_SUFFIXES:
            continue
        try:
            pixels = _decode_image(path)
        except Exception as exc:
            if on_error == "skip":
                log.warning("skipping undecodable image %s: %s", path, exc)
                continue
            raise ValueError(f"cannot decode image {path}: {exc}") from exc
        out.append(LabeledImage(pixels, label))
    return out


def ingest_directory(normal_dir, pneumonia_dir, on_error: str = "abort") -> list[LabeledImage]:
    """Load one folder per class; folder membership assigns the label.

    ``on_error`` is "abort" (raise on the first undecodable file) or "skip"
    (log and drop it). Files are taken in sorted-name order, normal class
    first.
    """
    if on_error not in ("abort", "skip"):
        raise ValueError(f"on_error must be 'abort' or 'skip', got {on_error!r}")
    classes = [("normal", normal_dir, 0), ("pneumonia", pneumonia_dir, 1)]
    images: list[LabeledImage] = []
    for name, directory, label in classes:
        batch = _ingest_class(directory, label, on_error)
        if not batch:
            raise ValueError(f"class {name!r} has zero samples in {directory}")
        images.extend(batch)
    return images


# ---------------------------------------------------------------------------
# split

@dataclass
class SplitPlan:
    """Seeded shuffle followed by contiguous train/val/test slices."""

    seed: int
    counts: tuple[int, int, int]

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValueError(f"counts must be three non-negative ints, got {self.counts}")


def default_split_counts(n: int) -> tuple[int, int, int]:
    """64/16/20 split; train rounds to nearest, val floors, test remains."""
    train = int(round(SPLIT_FRACTIONS[0] * n))
    val = int(SPLIT_FRACTIONS[1] * n)
    test = n - train - val
    if test < 0:
        raise ValueError(f"corpus of {n} images is too small to split")
    return train, val, test


def shuffle_split(images: Sequence[LabeledImage], plan: SplitPlan,
                  image_size: int = DEFAULT_IMAGE_SIZE):
    """Shuffle with the plan's seed, then cut contiguous splits.

    Every image is resized to ``image_size`` square on the way into the
    record arrays. Returns (train, val, test) RecordDatasets.
    """
    n = len(images)
    if sum(plan.counts) != n:
        raise ValueError(f"split counts {plan.counts} do not sum to corpus size {n}")
    order = np.random.default_rng(plan.seed).permutation(n)
    datasets = []
    start = 0
    for split, count in zip(("train", "val", "test"), plan.counts):
        idx = order[start:start + count]
        start += count
        pixels = np.stack([resize_bilinear(images[i].pixels, image_size, image_size)
                           for i in idx]) if count else \
            np.zeros((0, image_size, image_size, 3), dtype=np.uint8)
        labels = _one_hot([images[i].label for i in idx])
        datasets.append(RecordDataset(pixels, labels, split=split))
    return tuple(datasets)


# ---------------------------------------------------------------------------
# resize

def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample with half-pixel centers.

    A same-size call returns the input exactly; output is 8-bit with
    round-half-to-even quantization.
    """
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3:
        raise ValueError(f"expected [H, W, C] pixels, got {pixels.shape}")
    in_h, in_w = pixels.shape[:2]
    if in_h < 1 or in_w < 1:
        raise ValueError("source dimensions must be >= 1")
    if (in_h, in_w) == (out_h, out_w):
        return pixels.copy()

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
        frac = src - lo
        return lo, lo + (1 if n_in > 1 else 0), frac

    y0, y1, fy = axis_coords(in_h, out_h)
    x0, x1, fx = axis_coords(in_w, out_w)
    img = pixels.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bottom = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bottom * fy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# record files

def write_records(dataset: RecordDataset, path) -> None:
    """Serialize a dataset to the little-endian checksummed record layout."""
    n, h, w, c = dataset.images.shape
    k = dataset.labels.shape[1]
    if max(h, w) > 0xFFFF or c > 0xFF or k > 0xFF:
        raise ValueError(f"dimensions {(h, w, c, k)} exceed the format's field widths")
    chunks = [RECORD_MAGIC, struct.pack("<HHHBBQ", RECORD_VERSION, h, w, c, k, n)]
    for i in range(n):
        label = dataset.labels[i].tobytes()
        payload = dataset.images[i].tobytes()
        body = label + struct.pack("<I", len(payload)) + payload
        chunks.append(body)
        chunks.append(struct.pack("<I", zlib.crc32(label + payload) & 0xFFFFFFFF))
    Path(path).write_bytes(b"".join(chunks))


def read_records(path, split: str | None = None) -> RecordDataset:
    """Read a record file back; every record's CRC is verified.

    ``split`` defaults to the file stem when it names a standard split.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != RECORD_MAGIC:
        raise CorruptRecordError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 4 + 16:
        raise CorruptRecordError(f"{path}: header truncated")
    version, h, w, c, k, n = struct.unpack_from("<HHHBBQ", blob, 4)
    if version != RECORD_VERSION:
        raise CorruptRecordError(f"{path}: unsupported record version {version}")
    pos = 4 + 16
    payload_len_expected = h * w * c
    images = np.zeros((n, h, w, c), dtype=np.uint8)
    labels = np.zeros((n, k), dtype=np.uint8)

    def truncated(i: int) -> CorruptRecordError:
        last = f"last complete record is {i - 1}" if i else "no complete records"
        return CorruptRecordError(f"{path}: truncated at record {i} of {n}; {last}")

    for i in range(n):
        need = k + 4
        if pos + need > len(blob):
            raise truncated(i)
        label = blob[pos:pos + k]
        (plen,) = struct.unpack_from("<I", blob, pos + k)
        if plen != payload_len_expected:
            raise CorruptRecordError(
                f"{path}: record {i} payload length {plen} != {payload_len_expected}")
        if pos + need + plen + 4 > len(blob):
            raise truncated(i)
        payload = blob[pos + need:pos + need + plen]
        (crc,) = struct.unpack_from("<I", blob, pos + need + plen)
        if crc != zlib.crc32(label + payload) & 0xFFFFFFFF:
            raise CorruptRecordError(f"{path}: record {i} failed its checksum")
        labels[i] = np.frombuffer(label, dtype=np.uint8)
        images[i] = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
        pos += need + plen + 4
    if pos != len(blob):
        raise CorruptRecordError(f"{path}: {len(blob) - pos} trailing bytes after record {n - 1}")
    if split is None:
        stem = Path(path).stem
        split = stem if stem in ("train", "val", "test") else ""
    return RecordDataset(images, labels, split=split)


# ---------------------------------------------------------------------------
# augmentation

def augment_flip(images: np.ndarray, rng: np.random.Generator,
                 prob: float = 0.5) -> np.ndarray:
    """Mirror each image left-right independently with probability ``prob``."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected [N, H, W, C] batch, got {images.shape}")
    flip = rng.random(images.shape[0]) < prob
    out = images.copy()
    out[flip] = out[flip, :, ::-1, :]
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

def _noise_floor(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.normal(45.0, 12.0, (size, size))


def synth_corpus(n_per_class: int, image_size: int = 32, seed: int = 0) -> list[LabeledImage]:
    """Generate a two-class corpus: centered bright disc vs. diffuse patches.

    Class 0 images carry one large disc at the center; class 1 images carry
    several smaller patches scattered on a ring. Both sit on Gaussian noise,
    so the classes differ in spatial layout rather than by a single pixel.
    Deterministic per seed.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    s = int(image_size)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = []
    for _ in range(n_per_class):
        base = _noise_floor(rng, s)
        cy = s / 2 + rng.uniform(-s * 0.06, s * 0.06)
        cx = s / 2 + rng.uniform(-s * 0.06, s * 0.06)
        radius = s * rng.uniform(0.20, 0.26)
        dist = np.hypot(yy - cy, xx - cx)
        disc = 185.0 / (1.0 + np.exp((dist - radius) / (s * 0.02)))
        images.append(_to_labeled(base + disc, 0))
    for _ in range(n_per_class):
        base = _noise_floor(rng, s)
        blobs = np.zeros((s, s))
        for _ in range(5):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            ring = s * rng.uniform(0.30, 0.42)
            by, bx = s / 2 + ring * np.sin(angle), s / 2 + ring * np.cos(angle)
            sigma = s * rng.uniform(0.055, 0.08)
            blobs += 130.0 * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
        images.append(_to_labeled(base + blobs, 1))
    return images


def _to_labeled(field_values: np.ndarray, label: int) -> LabeledImage:
    plane = np.clip(np.rint(field_values), 0, 255).astype(np.uint8)
    return LabeledImage(np.repeat(plane[:, :, None], 3, axis=2), label)
