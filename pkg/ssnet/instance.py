"""Instance segmentation by iterated guided sampling.

A coordinate map starts as the fixed pixel grid; each step re-samples it with
the same offset table so instance-centre coordinates spread over the
instance. Pixels are then grouped by the coordinate they ended up holding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .igum import IgumConfig, igum_forward
from .sampler import GuidanceOffsetTable, denormalize, guided_sample, identity_grid, normalize
from .tensor import Tensor, record

L2 = "l2"
L1 = "l1"
SMOOTH_L1 = "smooth_l1"

LOSS_KINDS = [L2, L1, SMOOTH_L1]

QUANTIZE_PIXEL = "pixel"
QUANTIZE_SUM = "sum"

QUANTIZATIONS = [QUANTIZE_PIXEL, QUANTIZE_SUM]

DEFAULT_AREA_THRESHOLD = 64
SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True, eq=False)
class CoordinateMap:
    """Absolute normalized (x, y) coordinates per pixel, shape (B, 2, H, W)."""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4 or self.values.shape[1] != 2:
            raise DimensionError(f"coordinate map must have shape (B, 2, H, W), got {self.values.shape}")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


@dataclass(frozen=True, eq=False)
class CentroidTargets:
    centers: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.centers.ndim != 4 or self.centers.shape[1] != 2:
            raise DimensionError(f"centroid targets must have shape (B, 2, H, W), got {self.centers.shape}")
        expected = (self.centers.shape[0], 1) + self.centers.shape[2:]
        if self.mask.shape != expected:
            raise DimensionError(f"centroid mask must have shape {expected}, got {self.mask.shape}")

    @property
    def labeled_pixels(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class InstanceLabeling:
    """Dense per-image instance ids, shape (B, H, W); 0 is unassigned."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.labels.ndim != 3:
            raise DimensionError(f"instance labels must have shape (B, H, W), got {self.labels.shape}")
        for b, image in enumerate(self.labels):
            present = np.unique(image[image > 0])
            if present.size and not np.array_equal(present, np.arange(1, present.size + 1)):
                raise DimensionError(f"instance ids of image {b} are not dense 1..K: {present.tolist()}")

    @staticmethod
    def single(labels: np.ndarray) -> InstanceLabeling:
        return InstanceLabeling(np.asarray(labels, dtype=np.int64)[None])

    @property
    def batch(self) -> int:
        return self.labels.shape[0]

    def count(self, b: int = 0) -> int:
        return int(self.labels[b].max(initial=0))

    def areas(self, b: int = 0) -> np.ndarray:
        """Pixel area of ids 1..K of image ``b`` (index 0 holds id 1)."""
        return np.bincount(self.labels[b].ravel(), minlength=self.count(b) + 1)[1:]


def coordinate_grid(batch: int, height: int, width: int) -> CoordinateMap:
    grid = identity_grid(height, width).coords.data
    return CoordinateMap(Tensor(np.repeat(grid, batch, axis=0)))


def centroid_targets(
    instances: InstanceLabeling,
    frame_shape: tuple[int, int] | None = None,
) -> CentroidTargets:
    """Per-pixel instance centre in the normalized frame of a ``frame_shape`` map.

    A full-resolution pixel position ``c`` on an axis of size ``S`` sits at
    ``(c + 0.5) * s / S - 0.5`` on the frame axis of size ``s``.
    """
    batch, height, width = instances.labels.shape
    frame_h, frame_w = frame_shape or (height, width)
    centers = np.zeros((batch, 2, height, width))
    mask = np.zeros((batch, 1, height, width))
    rows, cols = np.mgrid[0:height, 0:width]

    for b in range(batch):
        image = instances.labels[b]
        count = instances.count(b)
        if count == 0:
            continue
        flat = image.ravel()
        area = np.maximum(np.bincount(flat, minlength=count + 1), 1)
        mean_row = np.bincount(flat, weights=rows.ravel(), minlength=count + 1) / area
        mean_col = np.bincount(flat, weights=cols.ravel(), minlength=count + 1) / area
        x = normalize((mean_col + 0.5) * frame_w / width - 0.5, frame_w)
        y = normalize((mean_row + 0.5) * frame_h / height - 0.5, frame_h)
        labeled = image > 0
        centers[b, 0] = np.where(labeled, x[image], 0.0)
        centers[b, 1] = np.where(labeled, y[image], 0.0)
        mask[b, 0] = labeled
    return CentroidTargets(centers, mask)


def diffuse(offsets: GuidanceOffsetTable, t: int, mode: str) -> CoordinateMap:
    """Re-sample the pixel grid ``t`` times with one shared offset table.

    The starting grid is a constant, so gradients only reach the offsets.
    """
    if t < 0:
        raise ConfigurationError(f"diffusion steps must be >= 0, got {t}")
    batch = offsets.values.shape[0]
    height, width = offsets.spatial_shape
    grid = identity_grid(height, width)
    current = coordinate_grid(batch, height, width).values
    for _ in range(t):
        current = guided_sample(current, grid, offsets, mode)
    return CoordinateMap(current)


def instance_loss(pred: CoordinateMap, targets: CentroidTargets, kind: str = L2) -> Tensor:
    """Mean centre-regression error over labeled pixels."""
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"instance loss must be one of {LOSS_KINDS}, got {kind!r}")
    if pred.values.shape != targets.centers.shape:
        raise DimensionError(f"prediction {pred.values.shape} and targets {targets.centers.shape} differ")

    labeled = targets.mask
    count = float(labeled.sum())
    shape = pred.values.shape
    if count == 0:
        return record("instance_loss", (pred.values,), np.array(0.0), lambda g: (np.zeros(shape),))

    diff = pred.values.data - targets.centers
    if kind == L2:
        norm = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
        per_pixel = norm
        slope = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
    elif kind == L1:
        per_pixel = np.abs(diff).sum(axis=1, keepdims=True)
        slope = np.sign(diff)
    else:
        small = np.abs(diff) < SMOOTH_L1_BETA
        huber = np.where(small, 0.5 * diff * diff / SMOOTH_L1_BETA, np.abs(diff) - 0.5 * SMOOTH_L1_BETA)
        per_pixel = huber.sum(axis=1, keepdims=True)
        slope = np.where(small, diff / SMOOTH_L1_BETA, np.sign(diff))

    loss = float((per_pixel * labeled).sum() / count)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (slope * labeled * (float(g) / count),)

    return record("instance_loss", (pred.values,), np.array(loss), grad_fn)


def extract_instances(
    final: CoordinateMap,
    area_threshold: int = DEFAULT_AREA_THRESHOLD,
    quantization: str = QUANTIZE_PIXEL,
    frame_shape: tuple[int, int] | None = None,
    mask: np.ndarray | None = None,
) -> InstanceLabeling:
    """Group pixels holding the same quantized coordinate into instances.

    Groups smaller than ``area_threshold`` fall back to 0; survivors are
    numbered 1..K by decreasing area.
    """
    if quantization not in QUANTIZATIONS:
        raise ConfigurationError(f"quantization must be one of {QUANTIZATIONS}, got {quantization!r}")
    if area_threshold < 0:
        raise ConfigurationError(f"area threshold must be >= 0, got {area_threshold}")
    values = final.values.data
    batch, _, height, width = values.shape
    frame_h, frame_w = frame_shape or (height, width)
    if mask is not None and mask.shape != (batch, height, width):
        raise DimensionError(f"extraction mask {mask.shape} does not match map {values.shape}")

    labels = np.zeros((batch, height, width), dtype=np.int64)
    for b in range(batch):
        ix = np.floor(denormalize(values[b, 0], frame_w) + 0.5).astype(np.int64)
        iy = np.floor(denormalize(values[b, 1], frame_h) + 0.5).astype(np.int64)
        keys = iy * frame_w + ix if quantization == QUANTIZE_PIXEL else ix + iy
        if mask is not None:
            keys = np.where(mask[b], keys, -1)
        labels[b] = relabel_by_area(keys, area_threshold)
    return InstanceLabeling(labels)


def fuse_semantic(
    labeling: InstanceLabeling,
    semantic: np.ndarray,
    thing_classes: Sequence[int],
    area_threshold: int = DEFAULT_AREA_THRESHOLD,
) -> tuple[InstanceLabeling, list[np.ndarray]]:
    """Keep instance pixels predicted as a thing class and name each instance's class.

    Returns the relabeled instances and, per image, the majority thing class of
    each surviving id (index 0 holds id 1).
    """
    if semantic.shape != labeling.labels.shape:
        raise DimensionError(f"semantic map {semantic.shape} does not match labeling {labeling.labels.shape}")
    is_thing = np.isin(semantic, list(thing_classes))
    labels = np.zeros_like(labeling.labels)
    categories: list[np.ndarray] = []
    for b in range(labeling.batch):
        keys = np.where(is_thing[b] & (labeling.labels[b] > 0), labeling.labels[b], -1)
        labels[b] = relabel_by_area(keys, area_threshold)
        count = int(labels[b].max(initial=0))
        classes = np.zeros(count, dtype=np.int64)
        for instance_id in range(1, count + 1):
            classes[instance_id - 1] = np.bincount(semantic[b][labels[b] == instance_id]).argmax()
        categories.append(classes)
    return InstanceLabeling(labels), categories


def relabel_by_area(keys: np.ndarray, area_threshold: int) -> np.ndarray:
    """Dense ids 1..K by decreasing group area; negative keys and small groups get 0."""
    out = np.zeros(keys.shape, dtype=np.int64)
    valid = keys >= 0
    if not valid.any():
        return out
    unique, inverse, counts = np.unique(keys[valid], return_inverse=True, return_counts=True)
    keep = counts >= area_threshold
    order = np.lexsort((unique[keep], -counts[keep]))
    new_ids = np.zeros(unique.size, dtype=np.int64)
    new_ids[np.flatnonzero(keep)[order]] = np.arange(1, order.size + 1)
    out[valid] = new_ids[inverse.reshape(-1)]
    return out


def instance_confidences(labeling: InstanceLabeling) -> list[np.ndarray]:
    """Per-instance score: area over the largest instance area of the same image."""
    scores = []
    for b in range(labeling.batch):
        areas = labeling.areas(b).astype(np.float64)
        scores.append(areas / areas.max() if areas.size else areas)
    return scores


def scaled_area_threshold(area_threshold: int, factor: int) -> int:
    return max(1, int(round(area_threshold / (factor * factor))))


def upsample_instance_output(
    lowres_map: CoordinateMap,
    lowres_offsets_raw: Tensor,
    cfg: IgumConfig,
) -> CoordinateMap:
    """Guided upsampling of a coordinate map; use nearest mode to keep ids exact."""
    return CoordinateMap(igum_forward(lowres_map.values, lowres_offsets_raw, cfg))
