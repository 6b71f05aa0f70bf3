"""Binary PPM (P6) and PGM (P5) files, 8 or 16 bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC_GRAY = b"P5"
MAGIC_RGB = b"P6"

_WHITESPACE = b" \t\r\n"


def read_pnm(path: str | Path) -> tuple[np.ndarray, int]:
    """Return the raster as (H, W) or (H, W, 3) unsigned integers and its maxval."""
    path = Path(path)
    data = path.read_bytes()
    magic = data[:2]
    if magic not in (MAGIC_GRAY, MAGIC_RGB):
        raise FormatError(f"{path}: unknown magic {magic!r}, expected P5 or P6")

    fields: list[int] = []
    offset = 2
    while len(fields) < 3:
        offset = _skip_space_and_comments(data, offset)
        end = offset
        while end < len(data) and data[end] not in _WHITESPACE and data[end] != ord("#"):
            end += 1
        token = data[offset:end]
        if not token:
            raise FormatError(f"{path}: truncated header")
        try:
            fields.append(int(token))
        except ValueError as exc:
            raise FormatError(f"{path}: bad header field {token!r}") from exc
        offset = end
    if offset >= len(data) or data[offset] not in _WHITESPACE:
        raise FormatError(f"{path}: header is not followed by a single whitespace")
    offset += 1

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad size {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise FormatError(f"{path}: maxval {maxval} outside 1..65535")

    channels = 3 if magic == MAGIC_RGB else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    needed = count * dtype.itemsize
    if len(data) - offset < needed:
        raise FormatError(f"{path}: truncated raster, {len(data) - offset} of {needed} bytes")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.int64)
    if raster.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return raster.reshape(shape), maxval


def write_pnm(path: str | Path, raster: np.ndarray, maxval: int = 255) -> None:
    path = Path(path)
    raster = np.asarray(raster)
    if raster.ndim == 3 and raster.shape[2] == 3:
        magic = MAGIC_RGB
    elif raster.ndim == 2:
        magic = MAGIC_GRAY
    else:
        raise FormatError(f"{path}: cannot store raster of shape {raster.shape}")
    if not 1 <= maxval <= 65535:
        raise FormatError(f"{path}: maxval {maxval} outside 1..65535")
    if raster.size and (raster.min() < 0 or raster.max() > maxval):
        raise FormatError(f"{path}: samples fall outside 0..{maxval}")

    height, width = raster.shape[:2]
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + f"\n{width} {height}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(raster, dtype=dtype).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """RGB image as (3, H, W) floats in [0, 1]."""
    raster, maxval = read_pnm(path)
    if raster.ndim != 3:
        raise FormatError(f"{path}: expected a P6 colour image")
    return raster.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"{path}: expected a (3, H, W) image, got {image.shape}")
    raster = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.int64)
    write_pnm(path, raster.transpose(1, 2, 0), 255)


def read_pgm(path: str | Path) -> np.ndarray:
    raster, _ = read_pnm(path)
    if raster.ndim != 2:
        raise FormatError(f"{path}: expected a P5 gray image")
    return raster


def write_pgm(path: str | Path, labels: np.ndarray, maxval: int = 255) -> None:
    write_pnm(path, np.asarray(labels, dtype=np.int64), maxval)


def _skip_space_and_comments(data: bytes, offset: int) -> int:
    while offset < len(data):
        if data[offset] in _WHITESPACE:
            offset += 1
        elif data[offset] == ord("#"):
            newline = data.find(b"\n", offset)
            offset = len(data) if newline < 0 else newline + 1
        else:
            break
    return offset
