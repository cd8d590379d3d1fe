"""Deterministic synthetic 2D segmentation data.

Each sample is a noisy grayscale image on a 0.2 background with one shape
per foreground class (a disk for class 1, an axis-aligned rectangle for
class 2). A shape is drawn in one of several appearance modes: mode 0 is
a uniform bright fill (~0.8), mode 1 a dark fill (~0.35) with a bright rim
(~0.9), further modes interpolate linearly. Modes share the class label,
so one prototype per class cannot capture them all.

Rendering is a pure function of (spec, index): samples may be generated in
any order, in parallel, and regenerate bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

BACKGROUND = 0.2
BRIGHT_FILL = 0.8
DARK_FILL = 0.35
RIM_LEVEL = 0.9
RIM_WIDTH = 2.0

# rng stream tags keep render/split/augment draws independent
_RENDER_STREAM = 101
_SPLIT_STREAM = 202

SSEG_MAGIC = b"SSEG"
SSEG_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class TensorFileError(ValueError):
    """Raised for malformed SSEG tensor files."""


@dataclass
class DatasetSpec:
    """Generation settings; the dataset itself is derived, never stored."""

    num_images: int
    image_size: int = 32
    num_classes: int = 2
    modes_per_class: int = 2
    noise_sigma: float = 0.1
    seed: int = 0
    val_images: int = 16
    test_images: int = 32

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.num_images < 1:
            raise ValueError(f"num_images must be >= 1, got {self.num_images}")
        if self.num_classes not in (2, 3):
            raise ValueError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.modes_per_class < 2:
            raise ValueError(f"modes_per_class must be >= 2, got {self.modes_per_class}")


@dataclass
class Sample:
    """One image with an optional ground-truth mask."""

    image: np.ndarray                 # [1,H,W] float32 in [0,1] plus noise
    mask: Optional[np.ndarray] = None  # [H,W] uint8 labels in [0, C)


@dataclass
class SplitIndex:
    """Disjoint labeled/unlabeled ids covering the training portion."""

    labeled_ids: list[int]
    unlabeled_ids: list[int]


def _mode_levels(mode: int, modes_per_class: int) -> tuple[float, float]:
    t = mode / (modes_per_class - 1)
    fill = BRIGHT_FILL + t * (DARK_FILL - BRIGHT_FILL)
    rim = BRIGHT_FILL + t * (RIM_LEVEL - BRIGHT_FILL)
    return fill, rim


def _paint(image, mask, support, interior, fill, rim_level, class_id):
    rim = support & ~interior
    image[interior] = fill
    image[rim] = rim_level
    mask[support] = class_id


def render_sample(spec: DatasetSpec, index: int) -> Sample:
    """Deterministic render of sample ``index``; see the module docstring."""
    if index < 0:
        raise ValueError(f"index must be nonnegative, got {index}")
    rng = np.random.default_rng((spec.seed, _RENDER_STREAM, index))
    s = spec.image_size
    image = np.full((s, s), BACKGROUND, dtype=np.float64)
    mask = np.zeros((s, s), dtype=np.uint8)
    yy, xx = np.mgrid[0:s, 0:s]

    # class 1: disk
    r = rng.uniform(0.12 * s, 0.28 * s)
    cy = rng.uniform(r + 1, s - r - 2)
    cx = rng.uniform(r + 1, s - r - 2)
    mode = int(rng.integers(spec.modes_per_class))
    fill, rim_level = _mode_levels(mode, spec.modes_per_class)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    support = d2 <= r * r
    interior = d2 <= max(r - RIM_WIDTH, 0.0) ** 2
    _paint(image, mask, support, interior, fill, rim_level, 1)

    if spec.num_classes == 3:
        # class 2: axis-aligned rectangle (overwrites any disk overlap)
        hh = rng.uniform(0.10 * s, 0.22 * s)
        hw = rng.uniform(0.10 * s, 0.22 * s)
        cy = rng.uniform(hh + 1, s - hh - 2)
        cx = rng.uniform(hw + 1, s - hw - 2)
        mode = int(rng.integers(spec.modes_per_class))
        fill, rim_level = _mode_levels(mode, spec.modes_per_class)
        dy = np.abs(yy - cy)
        dx = np.abs(xx - cx)
        support = (dy <= hh) & (dx <= hw)
        interior = (dy <= hh - RIM_WIDTH) & (dx <= hw - RIM_WIDTH)
        _paint(image, mask, support, interior, fill, rim_level, 2)

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0)
    return Sample(image=image.astype(np.float32)[None, :, :], mask=mask)


def render_range(spec: DatasetSpec, start: int, count: int) -> list[Sample]:
    return [render_sample(spec, i) for i in range(start, start + count)]


def train_samples(spec: DatasetSpec) -> list[Sample]:
    return render_range(spec, 0, spec.num_images)


def val_samples(spec: DatasetSpec) -> list[Sample]:
    return render_range(spec, spec.num_images, spec.val_images)


def test_samples(spec: DatasetSpec) -> list[Sample]:
    return render_range(spec, spec.num_images + spec.val_images, spec.test_images)


def split(spec: DatasetSpec, num_labeled: int, split_seed: int) -> SplitIndex:
    """Uniform labeled/unlabeled split of the training ids.

    Resamples (up to 100 times) until the labeled set contains at least one
    pixel of every class.
    """
    if not 1 <= num_labeled <= spec.num_images:
        raise ValueError(
            f"num_labeled must be in [1, {spec.num_images}], got {num_labeled}")
    wanted = set(range(spec.num_classes))
    for attempt in range(100):
        rng = np.random.default_rng((split_seed, _SPLIT_STREAM, attempt))
        chosen = rng.choice(spec.num_images, size=num_labeled, replace=False)
        labeled = sorted(int(i) for i in chosen)
        seen = set()
        for i in labeled:
            seen.update(np.unique(render_sample(spec, i).mask).tolist())
        if wanted <= seen:
            unlabeled = sorted(set(range(spec.num_images)) - set(labeled))
            return SplitIndex(labeled_ids=labeled, unlabeled_ids=unlabeled)
    raise ValueError(
        f"split: no labeled set of size {num_labeled} covered all "
        f"{spec.num_classes} classes after 100 resamples")


def flip_horizontal(sample: Sample) -> Sample:
    image = np.ascontiguousarray(sample.image[:, :, ::-1])
    mask = None if sample.mask is None else np.ascontiguousarray(sample.mask[:, ::-1])
    return Sample(image=image, mask=mask)


def augment(sample: Sample, rng: np.random.Generator,
            noise_sigma: float) -> Sample:
    """Random horizontal flip (p=0.5) plus image-only Gaussian noise at
    half the dataset's noise level. The mask is never perturbed."""
    out = sample
    if rng.random() < 0.5:
        out = flip_horizontal(out)
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma / 2.0, size=out.image.shape)
        out = replace(out, image=(out.image + noise).astype(np.float32))
    return out


# ---------------------------------------------------------------------------
# SSEG tensor files: magic "SSEG", u32 version, u8 dtype tag (0=f32, 1=u8),
# u32 rank, rank x u32 dims, row-major payload; little-endian, no padding.

def _tag_for(arr: np.ndarray) -> int:
    if arr.dtype == np.uint8:
        return 1
    if arr.dtype in (np.float32, np.float64):
        return 0
    raise TensorFileError(f"unsupported dtype {arr.dtype} for SSEG files")


def save_tensor_file(path, array: np.ndarray, dtype_tag: int | None = None) -> None:
    array = np.asarray(array)
    if array.ndim > 4:
        raise TensorFileError(f"rank must be <= 4, got {array.ndim}")
    tag = _tag_for(array) if dtype_tag is None else dtype_tag
    if tag not in _DTYPE_TAGS:
        raise TensorFileError(f"unknown dtype tag {tag}")
    with open(path, "wb") as fh:
        fh.write(SSEG_MAGIC)
        fh.write(struct.pack("<I", SSEG_VERSION))
        fh.write(struct.pack("<B", tag))
        fh.write(struct.pack("<I", array.ndim))
        for d in array.shape:
            fh.write(struct.pack("<I", d))
        fh.write(np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFileError(f"truncated file while reading {what}")
    return buf


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SSEG_MAGIC:
            raise TensorFileError(f"bad magic {magic!r}, expected {SSEG_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SSEG_VERSION:
            raise TensorFileError(f"unsupported version {version}")
        (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))
        if tag not in _DTYPE_TAGS:
            raise TensorFileError(f"unknown dtype tag {tag}")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
        if rank > 4:
            raise TensorFileError(f"rank must be <= 4, got {rank}")
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        count = 1
        for d in dims:
            count *= d
        dtype = _DTYPE_TAGS[tag]
        payload = _read_exact(fh, dtype.itemsize * count, "payload")
        trailing = fh.read(1)
        if trailing:
            raise TensorFileError("unexpected bytes after payload")
        return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
