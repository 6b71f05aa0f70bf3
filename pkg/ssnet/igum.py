"""Improved guided upsampling: low-resolution offsets steer a class-map resize."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError, DimensionError
from .sampler import (
    BILINEAR,
    SAMPLING_MODES,
    GuidanceOffsetTable,
    bound_offsets,
    guided_sample,
    guided_sample_bilinear,
    regular_grid,
)
from .tensor import Tensor

OFFSET_INTERPOLATION = BILINEAR


@dataclass(frozen=True)
class IgumConfig:
    upsample_factor: int = 8
    sampling_mode: str = BILINEAR

    def __post_init__(self) -> None:
        if self.upsample_factor < 1:
            raise ConfigurationError(f"upsample factor must be >= 1, got {self.upsample_factor}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ConfigurationError(
                f"sampling mode must be one of {SAMPLING_MODES}, got {self.sampling_mode!r}"
            )

    @property
    def offset_interpolation(self) -> str:
        return OFFSET_INTERPOLATION

    def with_mode(self, mode: str) -> IgumConfig:
        return IgumConfig(upsample_factor=self.upsample_factor, sampling_mode=mode)


def upsample_offsets(lowres: GuidanceOffsetTable, factor: int) -> GuidanceOffsetTable:
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return lowres
    height, width = lowres.spatial_shape
    grid = regular_grid(height, width, factor)
    return GuidanceOffsetTable(guided_sample_bilinear(lowres.values, grid))


def igum_forward(logits: Tensor, lowres_offsets_raw: Tensor, cfg: IgumConfig) -> Tensor:
    """Upsample ``logits`` by ``cfg.upsample_factor`` along a predicted offset field.

    Only the 2 x N x M raw offsets are predicted, whatever the class count.
    """
    if logits.ndim != 4:
        raise DimensionError(f"logits must be rank 4, got {logits.shape}")
    if lowres_offsets_raw.ndim != 4 or lowres_offsets_raw.shape[2:] != logits.shape[2:]:
        raise DimensionError(
            f"offsets {lowres_offsets_raw.shape} do not match the spatial dims of logits {logits.shape}"
        )
    height, width = logits.shape[2:]
    bounded = bound_offsets(lowres_offsets_raw)
    table = upsample_offsets(bounded, cfg.upsample_factor)
    grid = regular_grid(height, width, cfg.upsample_factor)
    return guided_sample(logits, grid, table, cfg.sampling_mode)


def gum_forward(logits: Tensor, fullres_offsets_raw: Tensor, cfg: IgumConfig) -> Tensor:
    """Guided upsampling with an offset table predicted at the target resolution."""
    if logits.ndim != 4:
        raise DimensionError(f"logits must be rank 4, got {logits.shape}")
    height, width = logits.shape[2:]
    target = (height * cfg.upsample_factor, width * cfg.upsample_factor)
    if fullres_offsets_raw.ndim != 4 or fullres_offsets_raw.shape[2:] != target:
        raise DimensionError(f"full-resolution offsets must be {target}, got {fullres_offsets_raw.shape}")
    grid = regular_grid(height, width, cfg.upsample_factor)
    return guided_sample(logits, grid, bound_offsets(fullres_offsets_raw), cfg.sampling_mode)
