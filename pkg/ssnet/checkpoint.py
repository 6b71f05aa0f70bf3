from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError, StructuralError
from .net import Encoder, EncoderConfig, folded_encoder

logger = logging.getLogger(__name__)

MAGIC = b"WSEG"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class Checkpoint:
    encoder: EncoderConfig
    state: dict[str, np.ndarray]
    meta: dict[str, object] = field(default_factory=dict)

    def build(self, folded: bool = False) -> Encoder:
        """Rebuild the encoder; ``folded`` returns the batch-norm-free eval network."""
        network = Encoder(self.encoder)
        try:
            network.load_state_dict(self.state)
        except StructuralError as exc:
            raise StructuralError(f"checkpoint does not match its own config: {exc}") from exc
        if folded:
            return folded_encoder(network)
        return network


def save_checkpoint(
    path: str | Path,
    encoder: Encoder,
    meta: Mapping[str, object] | None = None,
) -> None:
    if encoder.folded:
        raise StructuralError("only unfolded networks are checkpointed; fold after loading")
    path = Path(path)
    header = json.dumps(
        {"encoder": encoder.cfg.to_json(), "meta": dict(meta or {})},
        sort_keys=True,
    ).encode("utf-8")
    state = encoder.state_dict()

    chunks = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(header)), header, _U32.pack(len(state))]
    for name in sorted(state):
        values = state[name]
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(values.ndim))
        chunks.extend(_U64.pack(dim) for dim in values.shape)
        chunks.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.info("wrote checkpoint %s (%d records)", path, len(state))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)

    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, expected {FORMAT_VERSION}")

    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("encoder"), dict):
        raise FormatError(f"{path}: checkpoint header carries no encoder config")

    state: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8", errors="replace")
        rank = reader.u32()
        shape = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
        state[name] = values.reshape(shape)
    if reader.remaining():
        raise FormatError(f"{path}: {reader.remaining()} trailing bytes after the last record")

    meta = header.get("meta", {})
    logger.debug("loaded checkpoint %s (%d records)", path, len(state))
    return Checkpoint(
        encoder=EncoderConfig.from_json(header["encoder"]),
        state=state,
        meta=meta if isinstance(meta, dict) else {},
    )


class _Reader:
    def __init__(self, payload: bytes, path: Path) -> None:
        self._payload = payload
        self._offset = 0
        self._path = path

    def take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._payload):
            raise FormatError(f"{self._path}: truncated checkpoint at byte {self._offset}")
        chunk = self._payload[self._offset : end]
        self._offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(_U64.size))[0]

    def remaining(self) -> int:
        return len(self._payload) - self._offset
