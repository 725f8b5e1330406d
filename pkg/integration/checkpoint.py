"""
Binary checkpoint format.

Layout (all integers little-endian):

    magic "DSD1" | version u32 | little-endian flag u8 | tensor count u32
    per tensor: name length u16, utf-8 name, ndim u8, dims u64 × ndim, byte offset u64
    payload length u64 | raw float64 payloads | CRC32 of the payload u32

Offsets are relative to the start of the payload.
"""
import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DSD1"
FORMAT_VERSION = 1
EMA_PREFIX = "ema/"


class CheckpointError(Exception):
    """Exception raised for unreadable or inconsistent checkpoints"""

    def __init__(self, message, path=None, code=None):
        self.message = message
        self.path = path
        self.code = code

        detail = ""
        if path is not None:
            detail += f" in '{path}'"
        if code is not None:
            detail += f" [{code}]"

        super().__init__(f"{message}{detail}")


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    directory = bytearray()
    payload = bytearray()
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        directory += struct.pack("<H", len(encoded)) + encoded
        directory += struct.pack("<B", array.ndim)
        directory += struct.pack(f"<{array.ndim}Q", *array.shape)
        directory += struct.pack("<Q", len(payload))
        payload += array.tobytes()

    header = MAGIC + struct.pack("<IBI", FORMAT_VERSION, 1, len(tensors))
    return (bytes(header) + bytes(directory) + struct.pack("<Q", len(payload)) + bytes(payload)
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("Checkpoint ends inside the header", path=self.path, code="truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError("Checkpoint ends inside the directory", path=self.path, code="truncated")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def decode_checkpoint(data: bytes, path: str = None) -> Dict[str, np.ndarray]:
    reader = _Reader(data, path)
    if reader.raw(4) != MAGIC:
        raise CheckpointError("Not a checkpoint (bad magic)", path=path, code="bad-magic")
    version, little_endian, count = reader.take("<IBI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", path=path, code="bad-version")
    if little_endian != 1:
        raise CheckpointError("Only little-endian payloads are supported", path=path, code="bad-version")

    entries = []
    for _ in range(count):
        (name_len,) = reader.take("<H")
        name = reader.raw(name_len).decode("utf-8")
        (ndim,) = reader.take("<B")
        shape = reader.take(f"<{ndim}Q") if ndim else ()
        (offset,) = reader.take("<Q")
        entries.append((name, tuple(shape), offset))

    (payload_len,) = reader.take("<Q")
    if reader.pos + payload_len + 4 != len(data):
        raise CheckpointError(f"Payload length {payload_len} does not match the file size", path=path,
                              code="truncated")
    payload = data[reader.pos:reader.pos + payload_len]
    (stored_crc,) = struct.unpack_from("<I", data, reader.pos + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("Payload checksum mismatch", path=path, code="checksum")

    tensors = OrderedDict()
    expected_offset = 0
    for name, shape, offset in entries:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset != expected_offset or offset + nbytes > payload_len:
            raise CheckpointError(f"Tensor '{name}' has an overlapping or out-of-bounds offset", path=path,
                                  code="bad-directory")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        expected_offset = offset + nbytes
    if expected_offset != payload_len:
        raise CheckpointError("Payload holds bytes no tensor claims", path=path, code="bad-directory")
    return tensors


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    tmp.replace(path)
    logger.info(f"checkpoint written: {path} ({len(tensors)} tensors)")
    return path


def read_checkpoint(path, require_ema: bool = False) -> Dict[str, np.ndarray]:
    """
    Load a checkpoint

    Args:
        path: checkpoint file
        require_ema: reject files with no ``ema/`` tensors

    Returns:
        Ordered mapping tensor name -> float64 array.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path=str(path), code="unreadable")
    tensors = decode_checkpoint(data, str(path))
    if require_ema and not any(name.startswith(EMA_PREFIX) for name in tensors):
        raise CheckpointError("Checkpoint has no EMA section but the run uses an EMA target", path=str(path),
                              code="missing-ema")
    return tensors
