"""Labeled image datasets: synthetic shape families, directory ingestion,
stratified splits and noise augmentation.

Pixels are float64, channels-first (3×H×W) and always inside [0, 1]. All
randomized operations derive their generator from explicit seeds (plus the
sample's ``source_id`` where a per-sample stream is needed), so every output
is a pure function of its inputs.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Literal, Mapping, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import (
    EmptyDatasetError,
    FractionTooSmallError,
    InvalidArgumentError,
    MissingDirectoryError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ("grenade", "landmine", "projectile", "rocket")
SHAPE_FAMILIES = ("ellipse", "rectangle", "cross", "annulus", "triangle", "diamond", "star", "hexagon")
MAX_SYNTHETIC_CLASSES = 2 * len(SHAPE_FAMILIES)
MIN_RESOLUTION = 16
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_COLUMNS = ("source_id", "class_index", "class_name", "provenance")

_SUPERSAMPLE = 4


class Provenance(str, Enum):
    CLEAN = "clean"
    NOISY = "noisy"
    FGSM = "fgsm"
    PGD = "pgd"


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    label: int
    provenance: Provenance = Provenance.CLEAN
    source_id: str = ""

    def __post_init__(self) -> None:
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.size == 0:
            raise ShapeMismatchError(f"pixels must be a non-empty C×H×W raster, got shape {pixels.shape}")
        if not np.isfinite(pixels).all() or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidArgumentError(f"pixel values must lie in [0,1] (source_id={self.source_id})")
        if int(self.label) < 0:
            raise InvalidArgumentError(f"label must be non-negative, got {self.label}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def resolution(self) -> int:
        return int(self.pixels.shape[-1])

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.array(self.pixels))

    def with_pixels(self, pixels: np.ndarray, provenance: Provenance | str) -> "ImageSample":
        return replace(self, pixels=pixels, provenance=Provenance(provenance))


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[ImageSample, ...]
    class_count: int
    class_names: tuple[str, ...]
    metadata: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.class_count < 1:
            raise InvalidArgumentError(f"class_count must be positive, got {self.class_count}")
        if len(self.class_names) != self.class_count:
            raise InvalidArgumentError(
                f"class_names has {len(self.class_names)} entries but class_count is {self.class_count}"
            )
        for s in self.samples:
            if s.label >= self.class_count:
                raise InvalidArgumentError(f"label {s.label} of {s.source_id} is >= class_count {self.class_count}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> ImageSample:
        return self.samples[index]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def with_samples(self, samples: Sequence[ImageSample], **metadata) -> "Dataset":
        return Dataset(tuple(samples), self.class_count, self.class_names, {**self.metadata, **metadata})


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    test_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    seed: int = Field(3, ge=0)

    @model_validator(mode="after")
    def _fractions_sum_to_one(self) -> "SplitSpec":
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"train/val/test fractions must sum to 1.0, got {total!r}")
        return self

    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["gaussian", "salt_pepper"] = "gaussian"
    strength: float = Field(0.1, ge=0.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _flip_fraction_range(self) -> "NoiseSpec":
        if self.kind == "salt_pepper" and self.strength > 1.0:
            raise ValueError(f"salt_pepper strength is a flip fraction and must be <= 1, got {self.strength}")
        return self


# ---------------------------------------------------------------------------
# Synthetic shape families


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def _ring(radius_x: float, radius_y: float, n: int = 48) -> np.ndarray:
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    return np.stack([radius_x * np.cos(t), radius_y * np.sin(t)], axis=1)


def _regular(n: int, radius: float) -> np.ndarray:
    return _ring(radius, radius, n)


def _family_outlines(family: str, r: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Polygons (centered at the origin) for one shape family; the second
    polygon, when present, is a hole."""
    if family == "ellipse":
        return [_ring(r, r * rng.uniform(0.55, 0.8))]
    if family == "rectangle":
        a = r * rng.uniform(0.45, 0.7)
        return [np.array([[-r, -a], [r, -a], [r, a], [-r, a]])]
    if family == "cross":
        w = r * rng.uniform(0.25, 0.35)
        return [np.array([
            [-w, -r], [w, -r], [w, -w], [r, -w], [r, w], [w, w],
            [w, r], [-w, r], [-w, w], [-r, w], [-r, -w], [-w, -w],
        ])]
    if family == "annulus":
        return [_ring(r, r), _ring(r * rng.uniform(0.45, 0.6), r * rng.uniform(0.45, 0.6))]
    if family == "triangle":
        return [_regular(3, r)]
    if family == "diamond":
        a = r * rng.uniform(0.5, 0.7)
        return [np.array([[r, 0.0], [0.0, a], [-r, 0.0], [0.0, -a]])]
    if family == "star":
        pts = _regular(10, r)
        pts[1::2] *= 0.45
        return [pts]
    if family == "hexagon":
        return [_regular(6, r)]
    raise InvalidArgumentError(f"unknown shape family {family!r}")


def _render_shape(class_index: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    size = resolution * _SUPERSAMPLE
    family = SHAPE_FAMILIES[class_index % len(SHAPE_FAMILIES)]
    outlined = class_index >= len(SHAPE_FAMILIES)

    # background: two-color linear gradient in a random direction plus faint texture
    yy, xx = np.mgrid[0:size, 0:size] / float(size - 1)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (math.cos(theta) * xx + math.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(float(ramp.max() - ramp.min()), 1e-12)
    bg0, bg1 = rng.uniform(0.05, 0.45, 3), rng.uniform(0.05, 0.45, 3)
    background = bg0[None, None, :] * (1.0 - ramp[..., None]) + bg1[None, None, :] * ramp[..., None]
    background = np.clip(background + rng.normal(0.0, 0.02, background.shape), 0.0, 1.0)
    canvas = Image.fromarray(np.round(background * 255.0).astype(np.uint8))

    center = size / 2.0 + rng.uniform(-0.12, 0.12, 2) * size
    radius = rng.uniform(0.22, 0.34) * size
    angle = rng.uniform(0.0, 2.0 * math.pi)
    polygons = [_rotate(p, angle) + center for p in _family_outlines(family, radius, rng)]

    mask = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask)
    if outlined:
        width = max(2, int(radius * 0.12))
        for poly in polygons:
            pts = [tuple(p) for p in poly]
            draw.line(pts + [pts[0]], fill=255, width=width, joint="curve")
    else:
        draw.polygon([tuple(p) for p in polygons[0]], fill=255)
        for hole in polygons[1:]:
            draw.polygon([tuple(p) for p in hole], fill=0)

    fg = tuple(int(v) for v in np.round(rng.uniform(0.55, 1.0, 3) * 255.0))
    canvas = Image.composite(Image.new("RGB", (size, size), fg), canvas, mask)
    canvas = canvas.resize((resolution, resolution), Image.Resampling.LANCZOS)
    return np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0


def default_class_names(class_count: int) -> tuple[str, ...]:
    if class_count == len(DEFAULT_CLASS_NAMES):
        return DEFAULT_CLASS_NAMES
    return tuple(f"class_{i}" for i in range(class_count))


def generate_synthetic_dataset(
    class_count: int,
    per_class: int,
    resolution: int = 64,
    seed: int = 0,
    class_names: Sequence[str] | None = None,
) -> Dataset:
    """Render ``class_count × per_class`` images, one shape family per class.

    Each sample draws from its own generator seeded by (seed, class, index),
    so the dataset is byte-for-byte reproducible and independent of render
    order.
    """
    if class_count < 2 or class_count > MAX_SYNTHETIC_CLASSES:
        raise InvalidArgumentError(f"class_count must be in [2, {MAX_SYNTHETIC_CLASSES}], got {class_count}")
    if per_class < 1:
        raise InvalidArgumentError(f"per_class must be >= 1, got {per_class}")
    if resolution < MIN_RESOLUTION:
        raise InvalidArgumentError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if seed < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {seed}")
    names = tuple(class_names) if class_names is not None else default_class_names(class_count)

    samples = []
    for c in range(class_count):
        for i in range(per_class):
            rng = np.random.default_rng([seed, c, i])
            samples.append(ImageSample(
                pixels=_render_shape(c, resolution, rng),
                label=c,
                provenance=Provenance.CLEAN,
                source_id=f"syn{seed}-c{c}-{i:05d}",
            ))
    logger.info("generated synthetic dataset classes=%d per_class=%d resolution=%d seed=%d",
                class_count, per_class, resolution, seed)
    return Dataset(tuple(samples), class_count, names, {"source": "synthetic", "seed": seed})


# ---------------------------------------------------------------------------
# Directory datasets


def safe_filename(source_id: str) -> str:
    return source_id.replace("/", "__").replace("\\", "__")


def to_uint8_image(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(pixels).transpose(1, 2, 0) * 255.0).astype(np.uint8)


def export_dataset(d: Dataset, root: str | Path) -> Path:
    """Write ``<root>/<class_name>/<source_id>.png`` and ``manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name in d.class_names:
        (root / name).mkdir(exist_ok=True)
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for s in d.samples:
            name = d.class_names[s.label]
            Image.fromarray(to_uint8_image(s.pixels)).save(root / name / f"{safe_filename(s.source_id)}.png")
            writer.writerow([s.source_id, s.label, name, s.provenance.value])
    logger.info("exported dataset samples=%d root=%s", len(d), root)
    return manifest


def _read_manifest(root: Path) -> dict[str, tuple[str, str]]:
    path = root / "manifest.csv"
    if not path.is_file():
        return {}
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[safe_filename(row["source_id"])] = (row["source_id"], row.get("provenance") or "clean")
    return out


def load_directory_dataset(root_path: str | Path, class_names: Sequence[str], resolution: int = 64) -> Dataset:
    """Load ``<root>/<class_name>/*.png|jpg`` in lexicographic path order.

    Undecodable files are skipped with a warning and listed in
    ``metadata["skipped"]``. A class with no usable image is an error.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise MissingDirectoryError(f"dataset root does not exist: {root}")
    if resolution < MIN_RESOLUTION:
        raise InvalidArgumentError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    names = tuple(class_names)
    if not names:
        raise InvalidArgumentError("class_names must not be empty")

    entries: list[tuple[Path, int]] = []
    for label, name in enumerate(names):
        class_dir = root / name
        if not class_dir.is_dir():
            raise MissingDirectoryError(f"class directory missing: {class_dir}")
        files = [p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
        if not files:
            raise EmptyDatasetError(f"class {name!r} has no images under {class_dir}")
        entries.extend((p, label) for p in files)
    entries.sort(key=lambda e: e[0].as_posix())

    known = _read_manifest(root)
    samples: list[ImageSample] = []
    skipped: list[str] = []
    for path, label in entries:
        try:
            with Image.open(path) as im:
                im = im.convert("RGB").resize((resolution, resolution), Image.Resampling.BILINEAR)
                pixels = np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0
        except (OSError, UnidentifiedImageError, ValueError) as e:
            logger.warning("skipping undecodable image path=%s err=%s", path, e)
            skipped.append(str(path))
            continue
        source_id, provenance = known.get(path.stem, (path.relative_to(root).as_posix(), "clean"))
        samples.append(ImageSample(pixels, label, Provenance(provenance), source_id))

    present = {s.label for s in samples}
    for label, name in enumerate(names):
        if label not in present:
            raise EmptyDatasetError(f"class {name!r} has no decodable images under {root / name}")
    return Dataset(tuple(samples), len(names), names, {
        "source": "directory",
        "root": str(root),
        "skipped": skipped,
        "warning_count": len(skipped),
    })


def inspect_dataset(d: Dataset) -> dict:
    counts = np.bincount(d.labels(), minlength=d.class_count) if len(d) else np.zeros(d.class_count, dtype=int)
    total = int(counts.sum())
    return {
        "samples": total,
        "class_count": d.class_count,
        "resolution": d.samples[0].resolution if len(d) else None,
        "per_class": {name: int(n) for name, n in zip(d.class_names, counts)},
        "class_fraction": {name: (float(n) / total if total else 0.0) for name, n in zip(d.class_names, counts)},
        "provenance": sorted({s.provenance.value for s in d.samples}),
    }


# ---------------------------------------------------------------------------
# Splits


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    out = [math.floor(v) for v in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - out[k]), k))
    for k in order[: total - sum(out)]:
        out[k] += 1
    return out


def split_dataset(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split.

    Per class each split gets floor(n_c·f) samples plus at most one extra;
    extras go to the splits lagging furthest behind their largest-remainder
    totals, so per-class counts stay within one sample of the exact
    proportion.
    """
    if len(d) == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    fractions = spec.fractions()
    targets = _largest_remainder(len(d), fractions)
    if min(targets) == 0:
        raise FractionTooSmallError(f"split sizes {targets} leave a split empty for {len(d)} samples")

    labels = d.labels()
    rng = np.random.default_rng(spec.seed)
    assigned = [0, 0, 0]
    buckets: list[list[int]] = [[], [], []]
    for c in range(d.class_count):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        exact = [members.size * f for f in fractions]
        counts = [math.floor(v) for v in exact]
        lag = [targets[s] - assigned[s] - counts[s] for s in range(3)]
        for _ in range(members.size - sum(counts)):
            pick = max((s for s in range(3) if counts[s] == math.floor(exact[s])), key=lambda s: (lag[s], -s))
            counts[pick] += 1
            lag[pick] -= 1
        if counts[0] == 0:
            raise FractionTooSmallError(
                f"class {d.class_names[c]!r} ({members.size} samples) would get no training samples"
            )
        start = 0
        for s in range(3):
            buckets[s].extend(int(i) for i in members[start:start + counts[s]])
            start += counts[s]
            assigned[s] += counts[s]

    if min(assigned) == 0:
        raise FractionTooSmallError(f"split sizes {assigned} leave a split empty")
    names = ("train", "val", "test")
    out = tuple(
        d.with_samples([d.samples[i] for i in sorted(idx)], split=names[s], split_seed=spec.seed)
        for s, idx in enumerate(buckets)
    )
    logger.info("split dataset sizes train=%d val=%d test=%d seed=%d", *(len(x) for x in out), spec.seed)
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Noise


def _sample_stream(seed: int, source_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(source_id.encode("utf-8"))])


def add_noise(x: ImageSample, spec: NoiseSpec) -> ImageSample:
    rng = _sample_stream(spec.seed, x.source_id)
    pixels = np.array(x.pixels)
    if spec.kind == "gaussian":
        pixels = np.clip(pixels + rng.normal(0.0, spec.strength, pixels.shape), 0.0, 1.0)
    else:
        height, width = pixels.shape[-2:]
        n_flip = int(round(spec.strength * height * width))
        where = rng.choice(height * width, size=n_flip, replace=False)
        values = rng.integers(0, 2, size=n_flip).astype(np.float64)
        flat = pixels.reshape(pixels.shape[0], -1)
        flat[:, where] = values[None, :]
        pixels = flat.reshape(pixels.shape)
    return x.with_pixels(pixels, Provenance.NOISY)


def apply_noise(d: Dataset, spec: NoiseSpec, fraction: float = 1.0) -> Dataset:
    """Noise a seeded ``fraction`` of the samples; the rest pass through."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidArgumentError(f"fraction must be in [0,1], got {fraction}")
    chosen = set(range(len(d)))
    if fraction < 1.0:
        rng = np.random.default_rng([spec.seed, 1])
        chosen = set(rng.choice(len(d), size=int(round(fraction * len(d))), replace=False).tolist())
    samples = [add_noise(s, spec) if i in chosen else s for i, s in enumerate(d.samples)]
    return d.with_samples(samples, noise=spec.model_dump())


def dataset_to_tensors(d: Dataset, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if len(d) == 0:
        raise EmptyDatasetError("dataset has no samples")
    x = torch.from_numpy(np.stack([s.pixels for s in d.samples])).to(dtype)
    y = torch.from_numpy(d.labels())
    return x, y
