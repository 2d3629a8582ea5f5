"""Weak (pad-crop-flip) and strong (two random transforms) image views.

Every random decision is drawn from a per-sample stream keyed on
(global_seed, epoch, sample_id), so results do not depend on the order or
the thread in which samples are augmented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TRANSFORMS = ("rotate", "translate_x", "translate_y", "contrast", "brightness", "invert", "shear_x")

MAX_ROTATE_DEG = 30.0
MAX_TRANSLATE_FRAC = 0.2
MAX_SHEAR = 0.3
MAX_CONTRAST_DELTA = 0.5  # gain in [0.5, 1.5]
MAX_BRIGHTNESS = 0.3
CROP_PAD = 4
NUM_STRONG_OPS = 2

_WEAK, _STRONG = 0, 1


@dataclass(frozen=True)
class AugmentStream:
    global_seed: int
    epoch: int
    sample_id: int

    def rng(self, view: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.global_seed, self.epoch, self.sample_id, view])
        )


@dataclass(frozen=True)
class TransformSpec:
    name: str
    magnitude: float = 1.0
    sign: int = 1

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.name!r}; expected one of {TRANSFORMS}")
        if not (0.0 <= self.magnitude <= 1.0):
            raise ValueError(f"magnitude must lie in [0, 1], got {self.magnitude}")
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")


def _resample(image: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup with edge replication outside the image."""
    h, w = image.shape
    iy = np.clip(np.floor(src_y + 0.5).astype(np.intp), 0, h - 1)
    ix = np.clip(np.floor(src_x + 0.5).astype(np.intp), 0, w - 1)
    return image[iy, ix]


def _affine(image: np.ndarray, inv: np.ndarray) -> np.ndarray:
    # inv maps output (y, x) offsets from the centre to source offsets
    h, w = image.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    src_y = inv[0, 0] * dy + inv[0, 1] * dx + cy
    src_x = inv[1, 0] * dy + inv[1, 1] * dx + cx
    return _resample(image, src_y, src_x)


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = image.shape
    iy = np.clip(np.arange(h) - dy, 0, h - 1)
    ix = np.clip(np.arange(w) - dx, 0, w - 1)
    return image[np.ix_(iy, ix)]


def apply_transform(image: np.ndarray, t: TransformSpec) -> np.ndarray:
    """Apply one transform; ``magnitude`` 0 is the identity for all but invert."""
    s = t.sign * t.magnitude
    h, w = image.shape
    if t.name == "rotate":
        a = math.radians(MAX_ROTATE_DEG * s)
        cos, sin = math.cos(a), math.sin(a)
        out = _affine(image, np.array([[cos, sin], [-sin, cos]]))
    elif t.name == "translate_x":
        out = _shift(image, 0, int(math.floor(MAX_TRANSLATE_FRAC * w * s + 0.5)))
    elif t.name == "translate_y":
        out = _shift(image, int(math.floor(MAX_TRANSLATE_FRAC * h * s + 0.5)), 0)
    elif t.name == "shear_x":
        out = _affine(image, np.array([[1.0, 0.0], [-MAX_SHEAR * s, 1.0]]))
    elif t.name == "contrast":
        mean = image.mean()
        out = (image - mean) * (1.0 + MAX_CONTRAST_DELTA * s) + mean
    elif t.name == "brightness":
        out = image + MAX_BRIGHTNESS * s
    else:  # invert
        out = 1.0 - image
    return np.clip(out, 0.0, 1.0)


def weak_params(stream: AugmentStream, height: int, width: int) -> tuple[int, int, bool]:
    """(crop row offset, crop column offset, flip) into the padded image."""
    rng = stream.rng(_WEAK)
    dy, dx = rng.integers(0, 2 * CROP_PAD + 1, size=2)
    return int(dy), int(dx), bool(rng.random() < 0.5)


def weak_augment(image: np.ndarray, stream: AugmentStream) -> np.ndarray:
    h, w = image.shape
    dy, dx, flip = weak_params(stream, h, w)
    iy = np.clip(np.arange(h) + dy - CROP_PAD, 0, h - 1)
    ix = np.clip(np.arange(w) + dx - CROP_PAD, 0, w - 1)
    if flip:
        ix = ix[::-1]
    return image[np.ix_(iy, ix)]


def strong_ops(stream: AugmentStream) -> list[TransformSpec]:
    rng = stream.rng(_STRONG)
    names = rng.integers(0, len(TRANSFORMS), size=NUM_STRONG_OPS)
    mags = rng.random(NUM_STRONG_OPS)
    signs = rng.integers(0, 2, size=NUM_STRONG_OPS) * 2 - 1
    return [TransformSpec(TRANSFORMS[n], float(m), int(s)) for n, m, s in zip(names, mags, signs)]


def strong_augment(image: np.ndarray, stream: AugmentStream) -> np.ndarray:
    out = image
    for t in strong_ops(stream):
        out = apply_transform(out, t)
    return np.clip(out, 0.0, 1.0)


def augment_batch(
    images: np.ndarray,
    ids: np.ndarray,
    global_seed: int,
    epoch: int,
    strong: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Weak (and optionally strong) views for a batch, one stream per sample."""
    weak_out = np.empty_like(images)
    strong_out = np.empty_like(images) if strong else None
    for j, (img, sid) in enumerate(zip(images, ids)):
        stream = AugmentStream(global_seed, epoch, int(sid))
        weak_out[j] = weak_augment(img, stream)
        if strong:
            strong_out[j] = strong_augment(img, stream)
    return weak_out, strong_out
