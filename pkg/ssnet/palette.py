from __future__ import annotations

import colorsys

import numpy as np

HUE_STEP = 0.618033988749895
INSTANCE_SATURATION = 0.85

UNLABELED_COLOR = (0, 0, 0)

CLASS_COLORS: dict[int, tuple[int, int, int]] = {
    0: (70, 130, 180),
    1: (107, 142, 35),
    2: (220, 20, 60),
    3: (250, 170, 30),
}


def instance_color(instance_id: int, brightness: float = 1.0) -> tuple[int, int, int]:
    if instance_id <= 0:
        return UNLABELED_COLOR
    hue = (instance_id * HUE_STEP) % 1.0
    red, green, blue = colorsys.hsv_to_rgb(hue, INSTANCE_SATURATION, max(0.05, min(1.0, brightness)))
    return (
        _clamp_rgb(round(red * 255.0)),
        _clamp_rgb(round(green * 255.0)),
        _clamp_rgb(round(blue * 255.0)),
    )


def class_color(class_id: int) -> tuple[int, int, int]:
    if class_id in CLASS_COLORS:
        return CLASS_COLORS[class_id]
    # classes beyond the fixed table cycle through hues
    return instance_color(class_id + 1, brightness=0.7)


def colorize_instances(labels: np.ndarray) -> np.ndarray:
    """(H, W) instance ids to an (H, W, 3) uint8 image, one colour per id."""
    ids = np.asarray(labels, dtype=np.int64)
    table = np.array([instance_color(i) for i in range(int(ids.max(initial=0)) + 1)], dtype=np.uint8)
    return table[np.maximum(ids, 0)]


def colorize_classes(labels: np.ndarray) -> np.ndarray:
    ids = np.asarray(labels, dtype=np.int64)
    table = np.array([class_color(i) for i in range(int(ids.max(initial=0)) + 1)], dtype=np.uint8)
    return table[np.maximum(ids, 0)]


def _clamp_rgb(value: int) -> int:
    return max(0, min(255, int(value)))


def image_to_rgb(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to an (H, W, 3) uint8 image."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def scene_panels(
    image: np.ndarray,
    semantic: np.ndarray,
    instances: np.ndarray,
    predicted_semantic: np.ndarray | None = None,
    predicted_instances: np.ndarray | None = None,
) -> list[tuple[str, np.ndarray]]:
    panels = [
        ("Image", image_to_rgb(image)),
        ("Semantic", colorize_classes(semantic)),
        ("Instances", colorize_instances(instances)),
    ]
    if predicted_semantic is not None:
        panels.append(("Predicted semantic", colorize_classes(predicted_semantic)))
    if predicted_instances is not None:
        panels.append(("Predicted instances", colorize_instances(predicted_instances)))
    return panels
