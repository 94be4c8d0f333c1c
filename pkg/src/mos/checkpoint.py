"""Binary ``MOS1`` checkpoint container.

Layout (all little-endian)::

    b"MOS1" | u16 version | u16 kind | u32 header[n] | f32 payload...

The header is a kind-specific list of counts and dimensions; the payload is
every tensor in a fixed order, row-major, as 32-bit reals.  A sibling
``<file>.json`` repeats the dimensions for humans.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOS1"
VERSION = 1

KIND_BACKBONE = 1
KIND_ADAPTER = 2
KIND_GAUSSIAN = 3

PREAMBLE = struct.Struct("<4sHH")


class CheckpointError(ValueError):
    pass


def header_size(n_ints: int) -> int:
    return PREAMBLE.size + 4 * n_ints


def write_container(path, kind: int, header: list[int], tensors: list[np.ndarray],
                    manifest: dict | None = None) -> int:
    """Write one container; returns the number of bytes written."""
    path = Path(path)
    parts = [PREAMBLE.pack(MAGIC, VERSION, kind), np.asarray(header, dtype="<u4").tobytes()]
    for t in tensors:
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    blob = b"".join(parts)
    path.write_bytes(blob)
    if manifest is not None:
        side = dict(manifest, kind=kind, version=VERSION, bytes=len(blob))
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.offset = offset

    def floats(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        end = self.offset + 4 * count
        if end > len(self.blob):
            raise CheckpointError("checkpoint payload is truncated")
        arr = np.frombuffer(self.blob, dtype="<f4", count=count, offset=self.offset)
        self.offset = end
        return arr.astype(np.float64).reshape(shape)

    def done(self):
        if self.offset != len(self.blob):
            raise CheckpointError(f"{len(self.blob) - self.offset} trailing bytes in checkpoint")


def read_container(path, kind: int, n_header: int) -> tuple[list[int], _Reader]:
    blob = Path(path).read_bytes()
    if len(blob) < header_size(n_header):
        raise CheckpointError("checkpoint header is truncated")
    magic, version, got_kind = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if got_kind != kind:
        raise CheckpointError(f"expected checkpoint kind {kind}, found {got_kind}")
    header = np.frombuffer(blob, dtype="<u4", count=n_header, offset=PREAMBLE.size)
    return [int(v) for v in header], _Reader(blob, header_size(n_header))

