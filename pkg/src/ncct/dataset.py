"""Labeled grayscale datasets: toy generation, label-noise injection,
oversampling and the NCDS v1 binary format."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

# RAF-DB label order; the asymmetric-noise table below is written against it.
EXPRESSIONS = ("surprise", "fear", "disgust", "happy", "sad", "anger", "neutral")

# source class -> most-confused target class
DEFAULT_CONFUSION_PAIRS = {
    0: 5,  # surprise -> anger
    1: 0,  # fear -> surprise
    2: 5,  # disgust -> anger
    3: 6,  # happy -> neutral
    4: 6,  # sad -> neutral
    5: 3,  # anger -> happy
    6: 4,  # neutral -> sad
}

MAGIC = b"NCDS"
VERSION = 1
_HEADER = struct.Struct("<4sBIIII")
MIN_SIDE = 8
SPLITS = ("train", "test")


class DatasetFormatError(ValueError):
    """Base class for NCDS decoding failures."""


class MagicMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated dataset file: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    true_label: int
    train_label: int
    id: int


@dataclass(eq=False)
class Dataset:
    """Struct-of-arrays image collection.

    Pixels are stored as uint8 so that the float view (``images``) is always
    an exact multiple of 1/255 and the binary format round-trips losslessly.
    """

    pixels: np.ndarray  # (n, H, W) uint8
    true_labels: np.ndarray  # (n,) int64
    train_labels: np.ndarray  # (n,) int64
    ids: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"
    _float_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.pixels)
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (n, H, W), got shape {self.pixels.shape}")
        if not (len(self.true_labels) == len(self.train_labels) == len(self.ids) == n):
            raise ValueError("pixels, labels and ids must have equal length")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must satisfy C >= 2, got {self.num_classes}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for name, labels in (("true", self.true_labels), ("train", self.train_labels)):
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
        if len(np.unique(self.ids)) != n:
            raise ValueError("sample ids must be unique")
        for arr in (self.pixels, self.true_labels, self.train_labels, self.ids):
            arr.flags.writeable = False

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def images(self, dtype=np.float64) -> np.ndarray:
        """Intensities in [0, 1] as a read-only (n, H, W) array."""
        key = np.dtype(dtype).str
        if key not in self._float_cache:
            arr = self.pixels.astype(dtype) / np.dtype(dtype).type(255)
            arr.flags.writeable = False
            self._float_cache[key] = arr
        return self._float_cache[key]

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            image=self.images()[i],
            true_label=int(self.true_labels[i]),
            train_label=int(self.train_labels[i]),
            id=int(self.ids[i]),
        )

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.train_labels, other.train_labels)
            and np.array_equal(self.ids, other.ids)
        )

    def noise_rate(self) -> float:
        if len(self) == 0:
            return 0.0
        return int(np.count_nonzero(self.train_labels != self.true_labels)) / len(self)

    def class_counts(self, which: str = "train") -> np.ndarray:
        labels = self.train_labels if which == "train" else self.true_labels
        return np.bincount(labels, minlength=self.num_classes)

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            pixels=self.pixels,
            true_labels=self.true_labels,
            train_labels=self.train_labels,
            ids=self.ids,
            num_classes=self.num_classes,
            split=self.split,
        )
        fields.update(changes)
        return Dataset(**fields)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return self.replace(
            pixels=self.pixels[index],
            true_labels=self.true_labels[index],
            train_labels=self.train_labels[index],
            ids=self.ids[index],
        )


def noise_count(rate: float, n: int) -> int:
    """round(rate * n), halves rounded up."""
    return int(math.floor(rate * n + 0.5))


def _check_rate(rate: float) -> None:
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")


# --------------------------------------------------------------------------
# toy generator


def _template(c: int, num_classes: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Class-indexed pattern on a centred grid (coordinates in half-sides).

    Class c is a pair of bars at +-theta_c from the horizontal plus a mirrored
    pair of blobs at polar angle phi_c from the top, with theta and phi
    stepping evenly in c. Templates are left-right symmetric so a horizontal
    flip preserves the class; neighbouring classes differ by a small rotation
    of the bars.
    """
    theta = (c + 0.5) * math.pi / (2 * num_classes)
    out = np.zeros_like(xx)
    for sign in (1.0, -1.0):
        along = sign * xx * math.cos(theta) + yy * math.sin(theta)
        across = -sign * xx * math.sin(theta) + yy * math.cos(theta)
        bar = np.exp(-0.5 * (across / 0.1) ** 2) / (1.0 + np.exp((np.abs(along) - 0.75) / 0.05))
        out = np.maximum(out, bar)
    phi = (c + 0.5) * math.pi / num_classes
    by, bx = -0.6 * math.cos(phi), 0.6 * math.sin(phi)
    blobs = np.exp(-((yy - by) ** 2 + (np.abs(xx) - bx) ** 2) / (2 * 0.13**2))
    return np.clip(out + 0.8 * blobs, 0.0, 1.0)


def generate_toy_dataset(
    num_classes: int,
    per_class: int,
    height: int = 32,
    width: int = 32,
    variation: float = 0.3,
    seed: int = 0,
    split: str = "train",
    id_offset: int = 0,
) -> Dataset:
    """Render ``per_class`` perturbed copies of each class template.

    ``variation`` scales every perturbation: rotation up to 45 degrees,
    translation up to 15% of the side, additive pixel noise with std 0.3 and
    a global contrast jitter. At ``variation=0`` all images of a class are
    identical.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must satisfy C >= 2, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if height < MIN_SIDE or width < MIN_SIDE:
        raise ValueError(f"images must be at least {MIN_SIDE}x{MIN_SIDE} px, got {height}x{width}")
    if not (0.0 <= variation <= 1.0):
        raise ValueError(f"variation must lie in [0, 1], got {variation}")

    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    ys = (np.arange(height) - (height - 1) / 2) / (height / 2)
    xs = (np.arange(width) - (width - 1) / 2) / (width / 2)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")

    angles = rng.uniform(-1, 1, n) * variation * math.radians(45)
    shifts = rng.uniform(-1, 1, (n, 2)) * variation * 0.3
    gains = 1.0 + rng.uniform(-1, 1, n) * variation * 0.3
    noise = rng.standard_normal((n, height, width)) * variation * 0.3

    images = np.empty((n, height, width))
    for i in range(n):
        cos, sin = math.cos(angles[i]), math.sin(angles[i])
        # inverse-rotate the sampling grid about the (shifted) centre
        yy = gy - shifts[i, 0]
        xx = gx - shifts[i, 1]
        ry = cos * yy - sin * xx
        rx = sin * yy + cos * xx
        images[i] = gains[i] * _template(int(labels[i]), num_classes, ry, rx)
    images += noise
    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8)
    order = rng.permutation(n)
    return Dataset(
        pixels=pixels[order],
        true_labels=labels[order],
        train_labels=labels[order],
        ids=np.arange(n)[order] + id_offset,
        num_classes=num_classes,
        split=split,
    )


TEST_ID_OFFSET = 1 << 30


def split_seed(seed: int, split: str) -> int:
    """Generator seed for one split, so train and test draws are independent."""
    child = np.random.SeedSequence(seed).spawn(len(SPLITS))[SPLITS.index(split)]
    return int(child.generate_state(1)[0])


def generate_toy_split(
    split: str,
    num_classes: int = 7,
    per_class: int = 500,
    size: int = 32,
    variation: float = 0.3,
    seed: int = 0,
) -> Dataset:
    """One split of the toy benchmark; test ids start at TEST_ID_OFFSET."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return generate_toy_dataset(
        num_classes, per_class, size, size, variation,
        seed=split_seed(seed, split), split=split,
        id_offset=TEST_ID_OFFSET if split == "test" else 0,
    )


def generate_toy_splits(
    num_classes: int = 7,
    train_per_class: int = 500,
    test_per_class: int = 100,
    size: int = 32,
    variation: float = 0.3,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Independent train and test draws with disjoint ids."""
    return (
        generate_toy_split("train", num_classes, train_per_class, size, variation, seed),
        generate_toy_split("test", num_classes, test_per_class, size, variation, seed),
    )


# --------------------------------------------------------------------------
# label noise


def inject_symmetric_noise(d: Dataset, rate: float, seed: int = 0) -> Dataset:
    """Flip exactly round(rate*n) labels, each to a uniformly drawn wrong class."""
    _check_rate(rate)
    if d.split != "train":
        raise ValueError("label noise is only injected into a train split")
    count = noise_count(rate, len(d))
    if count == 0:
        return d.replace()
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(d), size=count, replace=False)
    offsets = rng.integers(1, d.num_classes, size=count)
    labels = d.train_labels.copy()
    labels[chosen] = (d.true_labels[chosen] + offsets) % d.num_classes
    return d.replace(train_labels=labels)


def validate_pairs(pairs: Mapping[int, int], num_classes: int) -> dict[int, int]:
    out = {}
    for src, dst in pairs.items():
        src, dst = int(src), int(dst)
        if src == dst:
            raise ValueError(f"confusion pair maps class {src} onto itself")
        if not (0 <= src < num_classes and 0 <= dst < num_classes):
            raise ValueError(f"confusion pair {src}->{dst} outside [0, {num_classes})")
        out[src] = dst
    return out


def inject_asymmetric_noise(
    d: Dataset, rate: float, pairs: Mapping[int, int] | None = None, seed: int = 0
) -> Dataset:
    """For each source class s, relabel round(rate*|s|) of its samples to pairs[s]."""
    _check_rate(rate)
    if d.split != "train":
        raise ValueError("label noise is only injected into a train split")
    pairs = validate_pairs(DEFAULT_CONFUSION_PAIRS if pairs is None else pairs, d.num_classes)
    rng = np.random.default_rng(seed)
    labels = d.train_labels.copy()
    for src in sorted(pairs):
        members = np.flatnonzero(d.true_labels == src)
        count = noise_count(rate, len(members))
        if count:
            chosen = rng.choice(members, size=count, replace=False)
            labels[chosen] = pairs[src]
    return d.replace(train_labels=labels)


def oversample_balance(d: Dataset, seed: int = 0) -> Dataset:
    """Duplicate minority-class samples (by train label) up to the largest class."""
    counts = d.class_counts("train")
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"cannot oversample: classes {missing} have no samples")
    target = counts.max()
    rng = np.random.default_rng(seed)
    extra = []
    for c in range(d.num_classes):
        deficit = target - counts[c]
        if deficit:
            extra.append(rng.choice(np.flatnonzero(d.train_labels == c), size=deficit, replace=True))
    if not extra:
        return d.replace()
    extra = np.concatenate(extra)
    next_id = int(d.ids.max()) + 1
    return Dataset(
        pixels=np.concatenate([d.pixels, d.pixels[extra]]),
        true_labels=np.concatenate([d.true_labels, d.true_labels[extra]]),
        train_labels=np.concatenate([d.train_labels, d.train_labels[extra]]),
        ids=np.concatenate([d.ids, np.arange(next_id, next_id + len(extra))]),
        num_classes=d.num_classes,
        split=d.split,
    )


# --------------------------------------------------------------------------
# NCDS v1


def _record_dtype(height: int, width: int) -> np.dtype:
    return np.dtype(
        [("id", "<u4"), ("true", "u1"), ("train", "u1"), ("pixels", "u1", (height, width))]
    )


def encode_dataset(d: Dataset) -> bytes:
    if d.num_classes > 256:
        raise ValueError("NCDS v1 stores labels as u8; at most 256 classes")
    if len(d) and d.ids.max() >= 2**32:
        raise ValueError("NCDS v1 stores ids as u32")
    header = _HEADER.pack(MAGIC, VERSION, len(d), d.num_classes, d.height, d.width)
    records = np.empty(len(d), dtype=_record_dtype(d.height, d.width))
    records["id"] = d.ids
    records["true"] = d.true_labels
    records["train"] = d.train_labels
    records["pixels"] = d.pixels
    body = header + records.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(data: bytes, split: str = "train") -> Dataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(_HEADER.size + 4, len(data))
    _, version, n, num_classes, height, width = _HEADER.unpack_from(data)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported NCDS version {version}")
    rec = _record_dtype(height, width)
    expected = _HEADER.size + n * rec.itemsize + 4
    if len(data) != expected:
        if len(data) < expected:
            raise TruncatedFileError(expected, len(data))
        raise DatasetFormatError(f"trailing bytes: expected {expected} bytes, got {len(data)}")
    (stored,) = struct.unpack_from("<I", data, expected - 4)
    actual = zlib.crc32(data[: expected - 4])
    if stored != actual:
        raise ChecksumError(f"CRC32 mismatch: stored {stored:08x}, computed {actual:08x}")
    records = np.frombuffer(data, dtype=rec, count=n, offset=_HEADER.size)
    return Dataset(
        pixels=records["pixels"].copy(),
        true_labels=records["true"].astype(np.int64),
        train_labels=records["train"].astype(np.int64),
        ids=records["id"].astype(np.int64),
        num_classes=num_classes,
        split=split,
    )


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def read_split(path) -> str | None:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        return None
    for line in sidecar.read_text().splitlines():
        key, sep, value = line.partition("=")
        if sep and key.strip() == "split":
            return value.strip()
    return None


def save_dataset(d: Dataset, path, extra_manifest: Mapping[str, object] | None = None) -> None:
    """Write the NCDS file and its ``<path>.manifest`` sidecar."""
    path = Path(path)
    path.write_bytes(encode_dataset(d))
    lines = [f"split={d.split}"]
    for key, value in (extra_manifest or {}).items():
        lines.append(f"{key}={value}")
    manifest_path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    split = split or read_split(path) or "train"
    return decode_dataset(data, split=split)
