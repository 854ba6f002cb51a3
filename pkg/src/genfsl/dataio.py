"""
Grayscale image datasets: PGM I/O, resizing, augmentation, class-weighted
sampling, few-shot subset selection and a synthetic chest-film generator.

On disk a dataset lives under ``<root>/<split>/<class_name>/*.pgm``. The two
class directory names are sorted lexicographically and mapped to labels 0
and 1, unless a ``positive_class`` is named, in which case that class gets
label 1. Label 1 is always the positive class for evaluation.

All randomness comes from ``numpy.random.Generator`` (PCG64) seeded through
``numpy.random.SeedSequence``. Per-item streams are keyed by
``(seed, ..., item_index)`` so serial and parallel loading agree.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, PGMError

DEFAULT_IMAGE_SIZE = 64


def rng_for(*key: int) -> np.random.Generator:
    """Generator seeded from an integer key tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    pos, tokens = 0, []
    names = ("magic", "width", "height", "maxval")
    for name in names[:count]:
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PGMError(name, "missing from header")
        tokens.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PGMError("maxval", "not followed by whitespace")
    return tokens, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode binary PGM bytes to a 1xHxW float32 array in [0, 1]."""
    if not data.startswith(b"P5"):
        raise PGMError("magic", f"expected P5, got {data[:2]!r}")
    tokens, start = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError("header", f"non-integer value ({exc})") from None
    if width <= 0:
        raise PGMError("width", f"must be positive, got {width}")
    if height <= 0:
        raise PGMError("height", f"must be positive, got {height}")
    if not 0 < maxval <= 255:
        raise PGMError("maxval", f"must be in 1..255, got {maxval}")
    payload = data[start : start + width * height]
    if len(payload) < width * height:
        raise PGMError("payload", f"truncated: expected {width * height} bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(1, height, width)
    return (raw.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def load_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def encode_pgm(image) -> bytes:
    """Encode an HxW (or 1xHxW) image in [0, 1] as 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise DataError(f"expected a single-channel image, got shape {np.shape(image)}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def write_pgm(image, path) -> None:
    Path(path).write_bytes(encode_pgm(image))


# ---------------------------------------------------------------------------
# resampling and augmentation
# ---------------------------------------------------------------------------


def _bilinear(img, ys, xs, fill=None):
    """Sample HxW ``img`` at fractional coordinates.

    With ``fill=None`` coordinates are clamped to the border; otherwise
    samples falling outside the pixel grid take ``fill``.
    """
    h, w = img.shape
    if fill is not None:
        outside = (ys < -0.5) | (ys > h - 0.5) | (xs < -0.5) | (xs > w - 0.5)
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    if fill is not None:
        out = np.where(outside, fill, out)
    return out


def resize(image, out_h, out_w) -> np.ndarray:
    """Bilinear resize with half-pixel centres; input 1xHxW or HxW."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    plane = img[0] if squeeze else img
    h, w = plane.shape
    if (h, w) == (out_h, out_w):
        out = plane
    else:
        ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
        xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
        out = _bilinear(plane, ys[:, None], xs[None, :])
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[None] if squeeze else out


def preprocess(image, image_size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    return resize(image, image_size, image_size)


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_max_degrees: float = 15.0
    horizontal_flip_probability: float = 0.5
    random_crop_fraction: float = 0.9
    enabled: bool = True

    def __post_init__(self):
        if self.rotation_max_degrees < 0:
            raise ConfigError("rotation_max_degrees must be >= 0")
        if not 0 <= self.horizontal_flip_probability <= 1:
            raise ConfigError("horizontal_flip_probability must lie in [0, 1]")
        if not 0 < self.random_crop_fraction <= 1:
            raise ConfigError("random_crop_fraction must lie in (0, 1]")


def rotate(plane, degrees: float) -> np.ndarray:
    """Rotate an HxW image clockwise (row 0 at top) about its centre.

    Pixels mapped from outside the source become 0.
    """
    h, w = plane.shape
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_y = c * dy - s * dx + cy
    src_x = s * dy + c * dx + cx
    return _bilinear(plane.astype(np.float64), src_y, src_x, fill=0.0)


def augment(image, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, horizontal flip, then random crop resized back.

    Always draws the same number of variates from ``rng`` so the stream
    position does not depend on outcomes.
    """
    if not config.enabled:
        return image
    img = np.asarray(image, dtype=np.float32)
    plane = img[0] if img.ndim == 3 else img
    h, w = plane.shape
    angle = rng.uniform(-config.rotation_max_degrees, config.rotation_max_degrees)
    flip = rng.random() < config.horizontal_flip_probability
    side_h = max(1, int(round(config.random_crop_fraction * h)))
    side_w = max(1, int(round(config.random_crop_fraction * w)))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))

    out = rotate(plane, angle) if angle != 0 else plane.astype(np.float64)
    if flip:
        out = out[:, ::-1]
    if (side_h, side_w) != (h, w):
        out = resize(out[top : top + side_h, left : left + side_w], h, w)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[None] if img.ndim == 3 else out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Preprocessed images ``(N, 1, S, S)`` with binary labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple = ("0", "1")
    paths: tuple = ()
    image_size: int = field(init=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1 or self.images.shape[2] != self.images.shape[3]:
            raise DataError(f"images must be (N, 1, S, S), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError("labels and images differ in length")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if self.paths and len(self.paths) != len(self.labels):
            raise DataError("paths and labels differ in length")
        self.paths = tuple(str(p) for p in self.paths)
        self.class_names = tuple(self.class_names)
        self.image_size = self.images.shape[-1]

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in (0, 1)}

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(
            self.images[idx],
            self.labels[idx],
            self.class_names,
            tuple(self.paths[i] for i in idx) if self.paths else (),
        )

    def canonical_order(self) -> np.ndarray:
        """Indices sorted by path (stable index order if paths are absent)."""
        if not self.paths:
            return np.arange(len(self))
        return np.array(sorted(range(len(self)), key=lambda i: self.paths[i]), dtype=np.intp)


def class_directories(split_dir, positive_class=None) -> list[tuple[str, int]]:
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise DataError(f"dataset split directory not found: {split_dir}")
    names = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if len(names) != 2:
        raise DataError(f"{split_dir} must contain exactly two class directories, found {names}")
    if positive_class is None:
        return [(names[0], 0), (names[1], 1)]
    if positive_class not in names:
        raise DataError(f"positive class {positive_class!r} not among {names}")
    return [(n, int(n == positive_class)) for n in names]


def load_split(root, split: str, image_size: int = DEFAULT_IMAGE_SIZE, positive_class=None) -> LabeledDataset:
    """Load ``<root>/<split>/<class>/*.pgm`` into memory, resized to ``image_size``."""
    split_dir = Path(root) / split
    classes = class_directories(split_dir, positive_class)
    images, labels, paths = [], [], []
    for name, label in classes:
        for path in sorted((split_dir / name).glob("*.pgm")):
            images.append(preprocess(load_pgm(path), image_size))
            labels.append(label)
            paths.append(str(path.relative_to(root)))
    if not images:
        raise DataError(f"no .pgm files under {split_dir}")
    names = tuple(n for n, _ in sorted(classes, key=lambda t: t[1]))
    return LabeledDataset(np.stack(images), np.array(labels), names, tuple(paths))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def compute_sampler_weights(counts) -> dict:
    """Per-class weight ``max_count / count``; accepts a dataset or a count dict."""
    if isinstance(counts, LabeledDataset):
        counts = counts.class_counts
    present = {c: n for c, n in counts.items() if n > 0}
    if not present:
        raise DataError("cannot weight an empty dataset")
    top = max(present.values())
    return {c: top / n for c, n in present.items()}


def weighted_sample(dataset: LabeledDataset, weights: dict, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with replacement, probability proportional to class weight."""
    if len(dataset) == 0:
        raise DataError("cannot sample from an empty dataset")
    w = np.array([weights[int(c)] for c in dataset.labels], dtype=np.float64)
    return rng.choice(len(dataset), size=batch_size, replace=True, p=w / w.sum())


SHOT_MODES = ("all", "all_balanced", "k_shot")


@dataclass(frozen=True)
class ShotSpec:
    mode: str = "all"
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SHOT_MODES:
            raise ConfigError(f"shot mode must be one of {SHOT_MODES}, got {self.mode!r}")
        if self.mode == "k_shot" and (self.k is None or self.k < 1):
            raise ConfigError("k_shot mode needs a positive k")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def balanced_loading(self) -> bool:
        return self.mode == "all_balanced"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "ShotSpec":
        """Parse ``all``, ``all-balanced`` or an integer K."""
        t = str(text).strip().lower().replace("-", "_")
        if t in ("all", "all_balanced"):
            return cls(t, None, seed)
        try:
            k = int(t)
        except ValueError:
            raise ConfigError(f"invalid shots value {text!r}") from None
        return cls("k_shot", k, seed)

    def label(self) -> str:
        return f"{self.k}-shot" if self.mode == "k_shot" else self.mode


def select_few_shot(dataset: LabeledDataset, spec: ShotSpec) -> LabeledDataset:
    """Choose ``k`` distinct items per class (or everything for the ``all`` modes)."""
    if spec.mode != "k_shot":
        return dataset
    order = dataset.canonical_order()
    labels = dataset.labels[order]
    chosen = []
    for c in (0, 1):
        members = order[labels == c]
        if spec.k > len(members):
            raise DataError(
                f"{spec.k}-shot selection needs {spec.k} items but class "
                f"{dataset.class_names[c]!r} has only {len(members)}"
            )
        rng = rng_for(spec.seed, c)
        chosen.append(members[np.sort(rng.choice(len(members), size=spec.k, replace=False))])
    return dataset.subset(np.concatenate(chosen))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SYNTHETIC_CLASSES = ("clear", "opacity")


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic chest-film-like image (HxW, values in [0, 1]).

    A bright vertical ramp background carries two dark elliptical "lung"
    fields. Label 1 adds 1-3 bright Gaussian blobs inside the ellipses.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    top, bottom = rng.uniform(0.55, 0.75), rng.uniform(0.8, 0.95)
    img = top + (bottom - top) * yy

    lungs = []
    cy = rng.uniform(0.45, 0.55)
    gap = rng.uniform(0.2, 0.26)
    for side in (-1, 1):
        ey = cy + rng.uniform(-0.03, 0.03)
        ex = 0.5 + side * gap + rng.uniform(-0.02, 0.02)
        ry, rx = rng.uniform(0.26, 0.32), rng.uniform(0.13, 0.17)
        inside = ((yy - ey) / ry) ** 2 + ((xx - ex) / rx) ** 2
        depth = rng.uniform(0.45, 0.6)
        img = img - depth * np.clip(1.0 - inside, 0.0, 1.0) ** 0.5
        lungs.append((ey, ex, ry, rx))

    # draw blob geometry for every image so both classes consume the same stream
    n_blobs = int(rng.integers(1, 4))
    blobs = []
    for _ in range(3):
        ey, ex, ry, rx = lungs[int(rng.integers(0, 2))]
        r, a = math.sqrt(rng.uniform(0, 0.5)), rng.uniform(0, 2 * math.pi)
        blobs.append((ey + r * ry * math.sin(a), ex + r * rx * math.cos(a), rng.uniform(0.04, 0.08), rng.uniform(0.25, 0.4)))
    if label == 1:
        for by, bx, sigma, amp in blobs[:n_blobs]:
            img = img + amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma**2))

    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(n_per_class: int, image_size: int, seed: int, out_dir, split: str = "train") -> Path:
    """Write ``n_per_class`` images per class under ``<out_dir>/<split>/<class>/``.

    Item ``i`` of class ``c`` is generated from the stream ``(seed, c, i)``
    and the output is byte-identical for equal arguments.
    """
    if n_per_class < 1 or image_size < 2:
        raise ConfigError("n_per_class must be >= 1 and image_size >= 2")
    root = Path(out_dir) / split
    for label, name in enumerate(SYNTHETIC_CLASSES):
        cls_dir = root / name
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = synthetic_image(label, image_size, rng_for(seed, label, i))
            write_pgm(img, cls_dir / f"{name}_{i:05d}.pgm")
    return Path(out_dir)


def synthetic_dataset(n_per_class: int, image_size: int, seed: int) -> LabeledDataset:
    """In-memory twin of :func:`generate_synthetic_dataset` (same pixels after quantisation)."""
    images, labels, paths = [], [], []
    for label, name in enumerate(SYNTHETIC_CLASSES):
        for i in range(n_per_class):
            img = synthetic_image(label, image_size, rng_for(seed, label, i))
            images.append(decode_pgm(encode_pgm(img)))
            labels.append(label)
            paths.append(os.path.join(name, f"{name}_{i:05d}.pgm"))
    return LabeledDataset(np.stack(images), np.array(labels), SYNTHETIC_CLASSES, tuple(paths))


def imbalanced(dataset: LabeledDataset, counts: Sequence[int]) -> LabeledDataset:
    """First ``counts[c]`` items of each class in canonical order."""
    order = dataset.canonical_order()
    keep = []
    for c, n in enumerate(counts):
        members = order[dataset.labels[order] == c]
        if n > len(members):
            raise DataError(f"class {dataset.class_names[c]!r} has only {len(members)} items, need {n}")
        keep.append(members[:n])
    return dataset.subset(np.concatenate(keep))
