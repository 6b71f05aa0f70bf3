"""Synthetic scenes and their on-disk layout.

A scene is a sky background (class 0), a ground band along the bottom
(class 1, stuff) and non-overlapping boxes (class 2) and discs (class 3), the
thing classes. Every region gets a class-typed colour so semantics are
learnable from appearance.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, GenerationError
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

logger = logging.getLogger(__name__)

CLASS_SKY = 0
CLASS_GROUND = 1
CLASS_BOX = 2
CLASS_DISC = 3

CLASS_NAMES = ["sky", "ground", "box", "disc"]
NUM_CLASSES = len(CLASS_NAMES)
THING_CLASSES = (CLASS_BOX, CLASS_DISC)

# base (hue, saturation, value) per class; each region jitters around it
CLASS_HSV: dict[int, tuple[float, float, float]] = {
    CLASS_SKY: (0.58, 0.45, 0.85),
    CLASS_GROUND: (0.30, 0.60, 0.45),
    CLASS_BOX: (0.00, 0.80, 0.80),
    CLASS_DISC: (0.14, 0.85, 0.95),
}
HUE_JITTER = 0.03
SV_JITTER = 0.08
PIXEL_NOISE = 0.015

MIN_SIZE = 32
MIN_HALF_EXTENT = 5
SEPARATION = 3
PLACEMENT_TRIES = 60
SCENE_ATTEMPTS = 8

SEMANTIC_MAXVAL = 255
INSTANCE_MAXVAL = 65535

IMAGE_PATTERN = "img_{:05d}.ppm"
SEMANTIC_PATTERN = "sem_{:05d}.pgm"
INSTANCE_PATTERN = "inst_{:05d}.pgm"
META_FILE = "meta.txt"


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    semantic: np.ndarray
    instances: np.ndarray
    thing_classes: tuple[int, ...] = THING_CLASSES
    centers: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise FormatError(f"sample image must be (3, H, W), got {self.image.shape}")
        if self.semantic.shape != self.image.shape[1:] or self.instances.shape != self.semantic.shape:
            raise FormatError(
                f"label maps {self.semantic.shape}/{self.instances.shape} do not match image {self.image.shape}"
            )
        instance_pixels = self.instances > 0
        if not np.isin(self.semantic[instance_pixels], self.thing_classes).all():
            raise FormatError("instance pixels carry a non-thing semantic label")
        present = np.unique(self.instances[instance_pixels])
        if present.size and not np.array_equal(present, np.arange(1, present.size + 1)):
            raise FormatError(f"instance ids are not dense 1..K: {present.tolist()}")

    @property
    def size(self) -> tuple[int, int]:
        return self.semantic.shape

    @property
    def instance_count(self) -> int:
        return int(self.instances.max(initial=0))


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    num_classes: int = NUM_CLASSES
    thing_classes: tuple[int, ...] = THING_CLASSES
    seed: int | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def subset(self, indices: Sequence[int]) -> Dataset:
        return Dataset(
            samples=tuple(self.samples[i] for i in indices),
            num_classes=self.num_classes,
            thing_classes=self.thing_classes,
            seed=self.seed,
            meta=self.meta,
        )

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (B, 3, H, W) images, (B, H, W) semantic and instance maps."""
        chosen = [self.samples[i] for i in indices]
        return (
            np.stack([s.image for s in chosen]),
            np.stack([s.semantic for s in chosen]),
            np.stack([s.instances for s in chosen]),
        )


def synth_generate(seed: int, count: int, height: int, width: int, max_shapes: int = 3) -> Dataset:
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ConfigurationError(f"scenes must be at least {MIN_SIZE}x{MIN_SIZE}, got {height}x{width}")
    if max_shapes < 1:
        raise ConfigurationError(f"max_shapes must be >= 1, got {max_shapes}")
    if count < 0:
        raise ConfigurationError(f"count must be >= 0, got {count}")

    samples = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        samples.append(_generate_with_retries(rng, index, height, width, max_shapes))
    logger.info("generated %d synthetic scenes of %dx%d (seed %d)", count, height, width, seed)
    return Dataset(samples=tuple(samples), seed=seed)


def _generate_with_retries(
    rng: np.random.Generator,
    index: int,
    height: int,
    width: int,
    max_shapes: int,
) -> Sample:
    for attempt in range(SCENE_ATTEMPTS):
        try:
            return _generate_scene(rng, height, width, max_shapes)
        except GenerationError as exc:
            logger.debug("scene %d attempt %d failed: %s", index, attempt, exc)
    raise GenerationError(
        f"sample {index}: could not pack up to {max_shapes} shapes into {height}x{width} "
        f"after {SCENE_ATTEMPTS} attempts"
    )


def _generate_scene(rng: np.random.Generator, height: int, width: int, max_shapes: int) -> Sample:
    image = np.empty((3, height, width))
    semantic = np.full((height, width), CLASS_SKY, dtype=np.int64)
    instances = np.zeros((height, width), dtype=np.int64)

    ground_top = int(rng.integers(height * 2 // 3, height * 5 // 6 + 1))
    semantic[ground_top:] = CLASS_GROUND
    image[:] = _class_color(rng, CLASS_SKY)[:, None, None]
    image[:, ground_top:] = _class_color(rng, CLASS_GROUND)[:, None, None]

    rows, cols = np.mgrid[0:height, 0:width]
    max_half = max(MIN_HALF_EXTENT, min(height, width) // 6)
    boxes: list[tuple[int, int, int, int]] = []
    centers: list[tuple[float, float]] = []

    for instance_id in range(1, int(rng.integers(1, max_shapes + 1)) + 1):
        kind = THING_CLASSES[int(rng.integers(len(THING_CLASSES)))]
        for _ in range(PLACEMENT_TRIES):
            if kind == CLASS_BOX:
                half_h = int(rng.integers(MIN_HALF_EXTENT, max_half + 1))
                half_w = int(rng.integers(MIN_HALF_EXTENT, max_half + 1))
            else:
                half_h = half_w = int(rng.integers(MIN_HALF_EXTENT, max_half + 1))
            cy = int(rng.integers(half_h, height - half_h))
            cx = int(rng.integers(half_w, width - half_w))
            bbox = (cy - half_h, cx - half_w, cy + half_h, cx + half_w)
            if all(_separated(bbox, other) for other in boxes):
                break
        else:
            raise GenerationError(f"no free spot for shape {instance_id}")

        if kind == CLASS_BOX:
            region = (abs(rows - cy) <= half_h) & (abs(cols - cx) <= half_w)
        else:
            region = (rows - cy) ** 2 + (cols - cx) ** 2 <= half_h * half_h
        boxes.append(bbox)
        centers.append((float(cy), float(cx)))
        semantic[region] = kind
        instances[region] = instance_id
        image[:, region] = _class_color(rng, kind)[:, None]

    image += rng.normal(0.0, PIXEL_NOISE, image.shape)
    # stored as 8-bit PPM, so quantize now to keep the file round trip lossless
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Sample(image=image, semantic=semantic, instances=instances, centers=tuple(centers))


def _separated(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    top_a, left_a, bottom_a, right_a = a
    top_b, left_b, bottom_b, right_b = b
    return (
        top_a - bottom_b > SEPARATION
        or top_b - bottom_a > SEPARATION
        or left_a - right_b > SEPARATION
        or left_b - right_a > SEPARATION
    )


def _class_color(rng: np.random.Generator, class_id: int) -> np.ndarray:
    hue, saturation, value = CLASS_HSV[class_id]
    hue = (hue + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    saturation = float(np.clip(saturation + rng.uniform(-SV_JITTER, SV_JITTER), 0.0, 1.0))
    value = float(np.clip(value + rng.uniform(-SV_JITTER, SV_JITTER), 0.0, 1.0))
    return np.array(colorsys.hsv_to_rgb(hue, saturation, value))


def split_dataset(dataset: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    """The last ``val_fraction`` of the samples become the validation split."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    total = len(dataset)
    val_count = int(round(total * val_fraction))
    if val_fraction > 0.0 and total > 1:
        val_count = min(max(val_count, 1), total - 1)
    else:
        val_count = 0
    cut = total - val_count
    return dataset.subset(range(cut)), dataset.subset(range(cut, total))


def write_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, sample in enumerate(dataset.samples):
        if sample.instance_count > INSTANCE_MAXVAL:
            raise FormatError(f"sample {index}: {sample.instance_count} instances exceed 16-bit ids")
        write_ppm(out_dir / IMAGE_PATTERN.format(index), sample.image)
        write_pgm(out_dir / SEMANTIC_PATTERN.format(index), sample.semantic, SEMANTIC_MAXVAL)
        write_pgm(out_dir / INSTANCE_PATTERN.format(index), sample.instances, INSTANCE_MAXVAL)

    meta = {
        "count": str(len(dataset)),
        "classes": str(dataset.num_classes),
        "thing_classes": ",".join(str(c) for c in dataset.thing_classes),
    }
    if dataset.seed is not None:
        meta["seed"] = str(dataset.seed)
    lines = [f"{key}={value}" for key, value in meta.items()]
    (out_dir / META_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %d samples to %s", len(dataset), out_dir)


def read_meta(path: str | Path) -> dict[str, str]:
    path = Path(path)
    meta: dict[str, str] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise FormatError(f"{path}:{number}: expected key=value, got {raw!r}")
        meta[key.strip()] = value.strip()
    for required in ("count", "classes", "thing_classes"):
        if required not in meta:
            raise FormatError(f"{path}: missing {required}")
    return meta


def read_dataset(data_dir: str | Path) -> Dataset:
    data_dir = Path(data_dir)
    meta_path = data_dir / META_FILE
    meta = read_meta(meta_path)
    try:
        count = int(meta["count"])
        num_classes = int(meta["classes"])
        thing_classes = tuple(int(c) for c in meta["thing_classes"].split(",") if c.strip())
        seed = int(meta["seed"]) if "seed" in meta else None
    except ValueError as exc:
        raise FormatError(f"{meta_path}: {exc}") from exc
    if count < 0 or num_classes < 1:
        raise FormatError(f"{meta_path}: bad count {count} or classes {num_classes}")

    samples = []
    for index in range(count):
        image = read_ppm(data_dir / IMAGE_PATTERN.format(index))
        semantic = read_pgm(data_dir / SEMANTIC_PATTERN.format(index))
        instances = read_pgm(data_dir / INSTANCE_PATTERN.format(index))
        if semantic.max(initial=0) >= num_classes:
            raise FormatError(f"{data_dir / SEMANTIC_PATTERN.format(index)}: class id beyond {num_classes - 1}")
        try:
            samples.append(Sample(image, semantic, instances, thing_classes))
        except FormatError as exc:
            raise FormatError(f"{data_dir}: sample {index}: {exc}") from exc
    logger.info("read %d samples from %s", count, data_dir)
    return Dataset(
        samples=tuple(samples),
        num_classes=num_classes,
        thing_classes=thing_classes,
        seed=seed,
        meta=meta,
    )
