"""Encoder, guided upsampling and instance diffusion wired together."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .igum import IgumConfig, igum_forward
from .instance import (
    CentroidTargets,
    CoordinateMap,
    InstanceLabeling,
    centroid_targets,
    diffuse,
    extract_instances,
    fuse_semantic,
    instance_confidences,
    upsample_instance_output,
)
from .net import Encoder, NetworkOutput
from .sampler import BILINEAR, NEAREST, bound_offsets
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class Prediction:
    network: NetworkOutput
    logits: Tensor
    coords: CoordinateMap
    lowres_shape: tuple[int, int]


@dataclass(frozen=True, eq=False)
class Decoded:
    semantic: np.ndarray
    instances: InstanceLabeling
    categories: list[np.ndarray]
    confidences: list[np.ndarray]


def predict(
    encoder: Encoder,
    images: np.ndarray | Tensor,
    t: int,
    training: bool,
    fixed_upsample: bool = False,
) -> Prediction:
    """Full-resolution logits and coordinate map.

    Training samples bilinearly so offsets get gradients; inference samples
    nearest so coordinate values stay exact. ``fixed_upsample`` zeroes the
    semantic offsets, giving plain resizing.
    """
    image = images if isinstance(images, Tensor) else Tensor(images)
    out = encoder(image, training)
    mode = BILINEAR if training else NEAREST
    cfg = IgumConfig(upsample_factor=encoder.cfg.upsample_factor, sampling_mode=mode)

    guidance = out.semantic_offsets_raw
    if fixed_upsample:
        guidance = Tensor.zeros(guidance.shape)
    logits = igum_forward(out.logits, guidance, cfg)

    lowres = diffuse(bound_offsets(out.instance_offsets_raw), t, mode)
    coords = upsample_instance_output(lowres, guidance, cfg)
    return Prediction(network=out, logits=logits, coords=coords, lowres_shape=lowres.spatial_shape)


def training_targets(instances: np.ndarray, prediction: Prediction) -> CentroidTargets:
    return centroid_targets(InstanceLabeling(np.asarray(instances, dtype=np.int64)), prediction.lowres_shape)


def decode(
    prediction: Prediction,
    thing_classes: Sequence[int],
    area_threshold: int,
) -> Decoded:
    semantic = prediction.logits.data.argmax(axis=1)
    thing_pixels = np.isin(semantic, list(thing_classes))
    grouped = extract_instances(
        prediction.coords,
        area_threshold=area_threshold,
        frame_shape=prediction.lowres_shape,
        mask=thing_pixels,
    )
    instances, categories = fuse_semantic(grouped, semantic, thing_classes, area_threshold)
    return Decoded(
        semantic=semantic,
        instances=instances,
        categories=categories,
        confidences=instance_confidences(instances),
    )
