"""Binary model checkpoints.

Layout::

    b"BASISCKPT1"                 magic
    uint32 version
    uint32 header length, header  UTF-8 JSON: model spec, kind, metadata, block table
    blocks                        float32 little-endian, in block-table order
    8 bytes                       blake2b digest of everything before it

The block table lists ``(name, shape, length)`` for every parameter block.
Parameters are stored as 32-bit reals; saving snaps the in-memory model to
float32 precision first, so a saved and reloaded model is bit-identical to
the one left in memory.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from basis_irl import model as M
from basis_irl.nn import ParamVector

MAGIC = b"BASISCKPT1"
VERSION = 1
_DIGEST = 8


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_DIGEST).digest()


def snap_float32(model: M.BasisModel) -> None:
    model.params.data[:] = model.params.data.astype("<f4").astype(float)


def encode(model: M.BasisModel, metadata: dict | None = None) -> bytes:
    snap_float32(model)
    table = [[name, list(shape), int(np.prod(shape))] for name, shape in model.params.shapes()]
    header = {
        "kind": "irl" if isinstance(model, M.IRLModel) else "basis",
        "spec": model.spec.to_dict(),
        "blocks": table,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = model.params.data.astype("<f4").tobytes()
    payload = MAGIC + struct.pack("<II", VERSION, len(head)) + head + body
    return payload + _digest(payload)


def decode(raw: bytes) -> tuple[M.BasisModel, dict]:
    if len(raw) < len(MAGIC) + 8 + _DIGEST or not raw.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if _digest(payload) != digest:
        raise ChecksumError("checkpoint checksum mismatch: file is corrupted")
    version, hlen = struct.unpack_from("<II", payload, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    start = len(MAGIC) + 8
    try:
        header = json.loads(payload[start : start + hlen].decode())
        spec = M.ModelSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    expected = [[n, list(s), int(np.prod(s))] for n, s in spec.shapes()]
    if header["blocks"] != expected:
        raise CheckpointError("block table does not match the declared model spec")
    body = payload[start + hlen :]
    size = sum(b[2] for b in expected)
    if len(body) != 4 * size:
        raise CheckpointError(f"expected {size} parameters, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").astype(float)
    cls = M.IRLModel if header["kind"] == "irl" else M.BasisModel
    return cls(spec, ParamVector(spec.shapes(), data)), header["metadata"]


def save_checkpoint(path: str | Path, model: M.BasisModel, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode(model, metadata))


def load_checkpoint(path: str | Path) -> tuple[M.BasisModel, dict]:
    return decode(Path(path).read_bytes())
