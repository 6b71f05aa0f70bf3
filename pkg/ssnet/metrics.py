from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, MetricError
from .instance import CoordinateMap, InstanceLabeling, relabel_by_area
from .sampler import denormalize

AP_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
BOUNDARY_WIDTH = 2


class ConfusionMatrix:
    """Pixel counts; rows are ground-truth classes, columns predictions."""

    def __init__(self, num_classes: int) -> None:
        if num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, gt: np.ndarray, pred: np.ndarray, mask: np.ndarray | None = None) -> None:
        if gt.shape != pred.shape:
            raise DimensionError(f"ground truth {gt.shape} and prediction {pred.shape} differ")
        valid = (gt >= 0) & (gt < self.num_classes)
        if mask is not None:
            if mask.shape != gt.shape:
                raise DimensionError(f"mask {mask.shape} does not match labels {gt.shape}")
            valid &= mask.astype(bool)
        if np.any((pred[valid] < 0) | (pred[valid] >= self.num_classes)):
            raise DimensionError(f"predicted class ids fall outside [0, {self.num_classes})")
        index = self.num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
        self.counts += np.bincount(index, minlength=self.num_classes**2).reshape(self.counts.shape)

    def merge(self, other: ConfusionMatrix) -> None:
        if other.num_classes != self.num_classes:
            raise DimensionError(f"cannot merge {other.num_classes}-class matrix into {self.num_classes}-class")
        self.counts += other.counts

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from ground truth."""
        tp = np.diag(self.counts).astype(np.float64)
        gt_total = self.counts.sum(axis=1)
        union = gt_total + self.counts.sum(axis=0) - tp
        present = gt_total > 0
        return np.where(present, tp / np.maximum(union, 1), np.nan)


def miou(conf: ConfusionMatrix) -> tuple[float, float, float]:
    """(mIoU, class average recall, global pixel accuracy) over classes present in ground truth."""
    if conf.total == 0:
        raise MetricError("no pixels were evaluated")
    counts = conf.counts
    tp = np.diag(counts).astype(np.float64)
    gt_total = counts.sum(axis=1)
    present = gt_total > 0
    iou = conf.iou()[present]
    recall = tp[present] / gt_total[present]
    return float(iou.mean()), float(recall.mean()), float(tp.sum() / conf.total)


def boundary_mask(labels: np.ndarray, width: int = BOUNDARY_WIDTH) -> np.ndarray:
    """Pixels within ``width`` pixels (Chebyshev) of a label change."""
    if width < 1:
        raise ConfigurationError(f"boundary width must be >= 1, got {width}")
    if labels.ndim == 3:
        return np.stack([boundary_mask(image, width) for image in labels])
    if labels.ndim != 2:
        raise DimensionError(f"boundary_mask expects (H, W) or (B, H, W) labels, got {labels.shape}")
    padded = np.pad(labels, width, mode="edge")
    windows = sliding_window_view(padded, (2 * width + 1, 2 * width + 1))
    return windows.max(axis=(-2, -1)) != windows.min(axis=(-2, -1))


def pairwise_iou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(P, G) IoU matrix between ids 1..P of ``pred`` and 1..G of ``gt``."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    num_pred = int(pred.max(initial=0))
    num_gt = int(gt.max(initial=0))
    joint = np.bincount(
        (pred.ravel() * (num_gt + 1) + gt.ravel()).astype(np.int64),
        minlength=(num_pred + 1) * (num_gt + 1),
    ).reshape(num_pred + 1, num_gt + 1)
    inter = joint[1:, 1:].astype(np.float64)
    pred_area = joint[1:].sum(axis=1)[:, None]
    gt_area = joint[:, 1:].sum(axis=0)[None, :]
    union = pred_area + gt_area - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class InstanceApAccumulator:
    """Collects ranked matches over images; AP is computed over the whole set."""

    thresholds: tuple[float, ...] = AP_THRESHOLDS
    num_gt: int = 0
    scores: list[float] = field(default_factory=list)
    # one row per prediction, one column per threshold
    hits: list[np.ndarray] = field(default_factory=list)

    def add(self, pred: np.ndarray, confidences: np.ndarray, gt: np.ndarray) -> None:
        iou = pairwise_iou(pred, gt)
        num_pred, num_gt = iou.shape
        if len(confidences) != num_pred:
            raise DimensionError(f"{len(confidences)} confidences for {num_pred} predicted instances")
        self.num_gt += num_gt
        order = sorted(range(num_pred), key=lambda i: (-confidences[i], i))
        rows = np.zeros((num_pred, len(self.thresholds)), dtype=bool)
        for column, threshold in enumerate(self.thresholds):
            taken = np.zeros(num_gt, dtype=bool)
            for i in order:
                candidates = np.where(taken | (iou[i] < threshold), -1.0, iou[i])
                if candidates.size == 0 or candidates.max() < 0:
                    continue
                best = int(candidates.argmax())
                taken[best] = True
                rows[i, column] = True
        for i in range(num_pred):
            self.scores.append(float(confidences[i]))
            self.hits.append(rows[i])

    def result(self) -> tuple[float, float]:
        """(AP averaged over thresholds, AP at the first threshold)."""
        if self.num_gt == 0:
            value = 1.0 if not self.scores else 0.0
            return value, value
        if not self.scores:
            return 0.0, 0.0
        order = np.argsort(-np.asarray(self.scores), kind="stable")
        hits = np.stack(self.hits)[order]
        per_threshold = [_average_precision(hits[:, k], self.num_gt) for k in range(len(self.thresholds))]
        return float(np.mean(per_threshold)), float(per_threshold[0])


def _average_precision(ranked_hits: np.ndarray, num_gt: int) -> float:
    tp = np.cumsum(ranked_hits)
    precision = tp / np.arange(1, ranked_hits.size + 1)
    recall = tp / num_gt
    # precision envelope, then area under the recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float((steps * envelope).sum())


def instance_ap(
    pred: InstanceLabeling,
    confidences: Sequence[np.ndarray],
    gt: InstanceLabeling,
    thresholds: Sequence[float] = AP_THRESHOLDS,
) -> tuple[float, float]:
    if pred.labels.shape != gt.labels.shape:
        raise DimensionError(f"prediction {pred.labels.shape} and ground truth {gt.labels.shape} differ")
    if len(confidences) != pred.batch:
        raise DimensionError(f"{len(confidences)} confidence vectors for {pred.batch} images")
    accumulator = InstanceApAccumulator(tuple(thresholds))
    for b in range(pred.batch):
        accumulator.add(pred.labels[b], np.asarray(confidences[b]), gt.labels[b])
    return accumulator.result()


@dataclass(frozen=True, eq=False)
class MeanShiftResult:
    labels: np.ndarray
    modes: np.ndarray
    kernel_evaluations: int
    iterations: int


def meanshift_oracle(points: np.ndarray, bandwidth: float, max_iter: int = 100, tol: float = 1e-6) -> MeanShiftResult:
    """Flat-kernel mean shift over (n, 2) points; labels are 1..K."""
    if bandwidth <= 0:
        raise ConfigurationError(f"bandwidth must be positive, got {bandwidth}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"points must be (n, d), got {points.shape}")
    n = points.shape[0]
    if n == 0:
        return MeanShiftResult(np.zeros(0, dtype=np.int64), np.zeros((0, points.shape[1])), 0, 0)

    shifted = points.copy()
    evaluations = 0
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        distance = np.linalg.norm(shifted[:, None, :] - points[None, :, :], axis=-1)
        evaluations += n * n
        kernel = distance <= bandwidth
        moved = (kernel @ points) / kernel.sum(axis=1, keepdims=True)
        converged = np.abs(moved - shifted).max() < tol
        shifted = moved
        if converged:
            break

    modes: list[np.ndarray] = []
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for k, mode in enumerate(modes):
            if np.linalg.norm(shifted[i] - mode) < bandwidth / 2:
                labels[i] = k + 1
                break
        else:
            modes.append(shifted[i])
            labels[i] = len(modes)
    return MeanShiftResult(labels, np.array(modes), evaluations, iterations)


def meanshift_labeling(
    final: CoordinateMap,
    bandwidth: float,
    mask: np.ndarray,
    max_iter: int = 100,
    frame_shape: tuple[int, int] | None = None,
) -> InstanceLabeling:
    """Cluster the pixel-unit coordinates held on ``mask`` pixels into instances."""
    values = final.values.data
    batch, _, height, width = values.shape
    if mask.shape != (batch, height, width):
        raise DimensionError(f"mask {mask.shape} does not match map {values.shape}")
    frame_h, frame_w = frame_shape or (height, width)
    labels = np.zeros((batch, height, width), dtype=np.int64)
    for b in range(batch):
        selected = mask[b].astype(bool)
        points = np.stack(
            [denormalize(values[b, 0][selected], frame_w), denormalize(values[b, 1][selected], frame_h)],
            axis=1,
        )
        keys = np.full((height, width), -1, dtype=np.int64)
        keys[selected] = meanshift_oracle(points, bandwidth, max_iter).labels
        labels[b] = relabel_by_area(keys, 1)
    return InstanceLabeling(labels)
