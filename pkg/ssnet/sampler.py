"""Guided spatial sampling.

Coordinates are normalized to [-1, 1] along each axis, with -1 and +1 on the
centres of the first and last pixels; ``denormalize`` maps them back to pixel
units. Displaced coordinates are clamped to the border before rounding or
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .functional import tanh
from .tensor import Tensor, record

NEAREST = "nearest"
BILINEAR = "bilinear"

SAMPLING_MODES = [NEAREST, BILINEAR]

SNAP_TOLERANCE = 1e-10


@dataclass(frozen=True)
class GuidanceOffsetTable:
    """Per-pixel (p, q) displacement; channel 0 shifts x, channel 1 shifts y."""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4 or self.values.shape[1] != 2:
            raise DimensionError(f"offset table must have shape (B, 2, H, W), got {self.values.shape}")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @staticmethod
    def zeros(batch: int, height: int, width: int) -> GuidanceOffsetTable:
        return GuidanceOffsetTable(Tensor.zeros((batch, 2, height, width)))


@dataclass(frozen=True)
class SampleGrid:
    coords: Tensor
    factor: int | None = None

    def __post_init__(self) -> None:
        if self.coords.ndim != 4 or self.coords.shape[1] != 2:
            raise DimensionError(f"sample grid must have shape (B, 2, H, W), got {self.coords.shape}")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.coords.shape[2], self.coords.shape[3]


def normalize(position: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return np.zeros_like(position, dtype=np.float64)
    return 2.0 * position / (size - 1) - 1.0


def denormalize(coord: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return np.zeros_like(coord, dtype=np.float64)
    return (coord + 1.0) / 2.0 * (size - 1)


def regular_grid(source_h: int, source_w: int, factor: int) -> SampleGrid:
    """Base grid of a ``factor`` resize; zero offsets reproduce plain resizing."""
    if source_h < 1 or source_w < 1 or factor < 1:
        raise ConfigurationError(f"regular_grid needs positive sizes and factor, got {source_h}, {source_w}, {factor}")
    ys = _axis_coords(source_h, factor)
    xs = _axis_coords(source_w, factor)
    coords = np.empty((1, 2, ys.size, xs.size))
    coords[0, 0] = xs[None, :]
    coords[0, 1] = ys[:, None]
    return SampleGrid(Tensor(coords), factor)


def identity_grid(height: int, width: int) -> SampleGrid:
    return regular_grid(height, width, 1)


def _axis_coords(size: int, factor: int) -> np.ndarray:
    out = np.arange(size * factor, dtype=np.float64)
    source = np.clip((out + 0.5) / factor - 0.5, 0.0, size - 1)
    return normalize(source, size)


def bound_offsets(raw: Tensor) -> GuidanceOffsetTable:
    if raw.ndim != 4 or raw.shape[1] != 2:
        raise DimensionError(f"raw offsets must have shape (B, 2, H, W), got {raw.shape}")
    return GuidanceOffsetTable(tanh(raw))


def guided_sample(
    source: Tensor,
    grid: SampleGrid,
    offsets: GuidanceOffsetTable | None,
    mode: str,
) -> Tensor:
    if mode == NEAREST:
        return guided_sample_nearest(source, grid, offsets)
    if mode == BILINEAR:
        return guided_sample_bilinear(source, grid, offsets)
    raise ConfigurationError(f"unknown sampling mode {mode!r}, expected one of {SAMPLING_MODES}")


def guided_sample_nearest(
    source: Tensor,
    grid: SampleGrid,
    offsets: GuidanceOffsetTable | None = None,
) -> Tensor:
    batch, channels, height, width = _check_source(source)
    px, py, _, _ = _displaced_positions(source, grid, offsets)
    ix = np.clip(np.floor(px + 0.5), 0, width - 1).astype(np.intp)
    iy = np.clip(np.floor(py + 0.5), 0, height - 1).astype(np.intp)
    out_h, out_w = px.shape[1:]

    # one index per output pixel, shared by every channel
    flat = (iy * width + ix).reshape(batch, -1)
    flat_source = source.data.reshape(batch, channels, -1)
    out = np.stack([np.take(flat_source[b], flat[b], axis=1) for b in range(batch)])
    out = out.reshape(batch, channels, out_h, out_w)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, ...]:
        gather = np.broadcast_to(flat[:, None, :], (batch, channels, flat.shape[-1]))
        grad_source = _scatter(g.reshape(batch, channels, -1), gather, source.shape)
        return (grad_source,) if offsets is None else (grad_source, None)

    inputs = (source,) if offsets is None else (source, offsets.values)
    return record("guided_sample_nearest", inputs, out, grad_fn)


def guided_sample_bilinear(
    source: Tensor,
    grid: SampleGrid,
    offsets: GuidanceOffsetTable | None = None,
) -> Tensor:
    batch, channels, height, width = _check_source(source)
    px, py, inside_x, inside_y = _displaced_positions(source, grid, offsets)
    out_h, out_w = px.shape[1:]

    x0, wx = _cell(px, width)
    y0, wy = _cell(py, height)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)

    flat_source = source.data.reshape(batch, channels, -1)
    corners = []
    for rows, cols in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        index = np.broadcast_to((rows * width + cols).reshape(batch, 1, -1), (batch, channels, out_h * out_w))
        values = np.take_along_axis(flat_source, index, axis=2).reshape(batch, channels, out_h, out_w)
        corners.append((index, values))
    (i00, v00), (i01, v01), (i10, v10), (i11, v11) = corners

    wx4 = wx[:, None]
    wy4 = wy[:, None]
    w00 = (1.0 - wy4) * (1.0 - wx4)
    w01 = (1.0 - wy4) * wx4
    w10 = wy4 * (1.0 - wx4)
    w11 = wy4 * wx4
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, ...]:
        grad_source = np.zeros(source.shape)
        for index, weight in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
            grad_source += _scatter((g * weight).reshape(batch, channels, -1), index, source.shape)
        if offsets is None:
            return (grad_source,)
        d_fx = (1.0 - wy4) * (v01 - v00) + wy4 * (v11 - v10)
        d_fy = (1.0 - wx4) * (v10 - v00) + wx4 * (v11 - v01)
        grad_offsets = np.empty(offsets.values.shape)
        grad_offsets[:, 0] = (g * d_fx).sum(axis=1) * inside_x * (0.5 * (width - 1))
        grad_offsets[:, 1] = (g * d_fy).sum(axis=1) * inside_y * (0.5 * (height - 1))
        return grad_source, grad_offsets

    inputs = (source,) if offsets is None else (source, offsets.values)
    return record("guided_sample_bilinear", inputs, out, grad_fn)


def _check_source(source: Tensor) -> tuple[int, int, int, int]:
    if source.ndim != 4:
        raise DimensionError(f"sampling source must be rank 4, got {source.shape}")
    batch, channels, height, width = source.shape
    return batch, channels, height, width


def _displaced_positions(
    source: Tensor,
    grid: SampleGrid,
    offsets: GuidanceOffsetTable | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    batch, _, height, width = source.shape
    coords = grid.coords.data
    if coords.shape[0] not in (1, batch):
        raise DimensionError(f"grid batch {coords.shape[0]} does not match source batch {batch}")
    gx = np.broadcast_to(coords[:, 0], (batch,) + coords.shape[2:])
    gy = np.broadcast_to(coords[:, 1], (batch,) + coords.shape[2:])
    if offsets is not None:
        table = offsets.values.data
        if table.shape[0] != batch or table.shape[2:] != coords.shape[2:]:
            raise DimensionError(
                f"offset table {table.shape} does not match grid {coords.shape} for batch {batch}"
            )
        gx = gx + table[:, 0]
        gy = gy + table[:, 1]
    # clamping precedes rounding; the clamp passes gradient only inside [-1, 1]
    inside_x = ((gx >= -1.0) & (gx <= 1.0)).astype(np.float64)
    inside_y = ((gy >= -1.0) & (gy <= 1.0)).astype(np.float64)
    px = _snap(denormalize(np.clip(gx, -1.0, 1.0), width))
    py = _snap(denormalize(np.clip(gy, -1.0, 1.0), height))
    return px, py, inside_x, inside_y


def _snap(position: np.ndarray) -> np.ndarray:
    # normalize/denormalize round trips land within an ulp of pixel centres
    centre = np.rint(position)
    return np.where(np.abs(position - centre) < SNAP_TOLERANCE, centre, position)


def _cell(position: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    if size == 1:
        return np.zeros(position.shape, dtype=np.intp), np.zeros(position.shape)
    lower = np.clip(np.floor(position), 0, size - 2)
    return lower.astype(np.intp), position - lower


def _scatter(values: np.ndarray, index: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    batch, channels = shape[0], shape[1]
    plane = shape[2] * shape[3]
    rows = (np.arange(batch * channels) * plane).reshape(batch, channels, 1)
    summed = np.bincount((index + rows).ravel(), weights=values.ravel(), minlength=batch * channels * plane)
    return summed.reshape(shape)


def upsample_nearest(source: Tensor, factor: int) -> Tensor:
    """Plain nearest-neighbour resize by an integer factor (not recorded)."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    data = np.repeat(np.repeat(source.data, factor, axis=2), factor, axis=3)
    return Tensor(data)


def upsample_bilinear(source: Tensor, factor: int) -> Tensor:
    """Plain half-pixel-centred bilinear resize by an integer factor (not recorded)."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    data = _resize_axis(source.data, factor, axis=2)
    data = _resize_axis(data, factor, axis=3)
    return Tensor(data)


def _resize_axis(data: np.ndarray, factor: int, axis: int) -> np.ndarray:
    size = data.shape[axis]
    position = np.maximum((np.arange(size * factor) + 0.5) / factor - 0.5, 0.0)
    lower = np.minimum(np.floor(position).astype(np.intp), size - 1)
    upper = np.minimum(lower + 1, size - 1)
    weight = position - lower
    shape = [1] * data.ndim
    shape[axis] = -1
    weight = weight.reshape(shape)
    return np.take(data, lower, axis=axis) * (1.0 - weight) + np.take(data, upper, axis=axis) * weight
