"""Versioned weight container.

Layout (all integers little-endian):

    magic   b"HMFN"
    version u32
    count   u32
    count x entry:
        name_len u32, name bytes (utf-8)
        rank     u32, dims u64 * rank
        payload  float32 * prod(dims)

Entries are written sorted by name so identical tensors give identical bytes.
"""

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"HMFN"
FORMAT_VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays into the container format."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes, source: str | Path = "<bytes>") -> dict[str, np.ndarray]:
    """Parse a container produced by ``encode_tensors``.

    Raises:
        CheckpointError: On bad magic, unknown version, or truncation.
    """
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError("Checkpoint is truncated", source)
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("Not an HMFN checkpoint (bad magic)", source)
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", source)

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = payload.astype(np.float32)
    if offset != len(view):
        raise CheckpointError("Trailing bytes after last tensor", source)
    return tensors


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> Path:
    """Write named arrays to ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensors(tensors))
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint: {e}", path) from e
    return path


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read named arrays from ``path``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path) from e
    return decode_tensors(blob, path)
