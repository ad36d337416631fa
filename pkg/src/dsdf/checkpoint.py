"""Binary checkpoint I/O for named parameter tensors.

Layout (little-endian throughout):

    magic   4 bytes  b"DSDF"
    version u32      currently 1
    count   u32      number of entries
    entry:  name_len u32, name utf-8 bytes,
            rank u32, extents u32[rank],
            payload float32[prod(extents)]

Entries are written in sorted-name order so that identical parameter sets
serialize to identical bytes; save -> load -> save round-trips bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"DSDF"
VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write named tensors (Tensor or ndarray values) as float32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            value = tensors[name]
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            payload = np.ascontiguousarray(data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", payload.ndim))
            fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            fh.write(payload.tobytes())


def load_tensors(path) -> dict:
    """Read a checkpoint back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            extents = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(extents)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset)
            offset += 4 * n_values
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated entry ({exc})") from exc
        out[name] = payload.reshape(extents).copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out


def load_into(path, params: dict) -> None:
    """Load a checkpoint into an existing named-parameter dict, in place.

    Raises CheckpointError naming the first tensor whose geometry disagrees
    with the checkpoint, and on missing or unexpected entries.
    """
    stored = load_tensors(path)
    for name in sorted(params):
        if name not in stored:
            raise CheckpointError(f"{path}: missing tensor '{name}'")
        value = stored[name]
        target = params[name]
        if tuple(value.shape) != tuple(target.shape):
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {tuple(value.shape)}, "
                f"model expects {tuple(target.shape)}"
            )
        target.data = value.astype(target.data.dtype)
    extra = set(stored) - set(params)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor '{sorted(extra)[0]}'")
