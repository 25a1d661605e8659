"""Binary checkpoint: config text plus a named float32 tensor table.

Layout (little-endian)::

    b"SMRN" | u32 version | u32 len | config text (utf-8)
    u32 count | count x (u16 len | name | u8 ndim | ndim x u32 | float32 data)
    u64 checksum (blake2b-64 of every preceding byte)
"""

from __future__ import annotations

import hashlib
import io
import struct
from typing import Dict, Tuple

import numpy as np

from .config import RunConfig
from .detector import SMRNet

MAGIC = b"SMRN"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes are corrupt, truncated or of an unknown format."""


def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def dumps(cfg: RunConfig, state: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    text = cfg.dumps().encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<Q", checksum(payload))


def loads(blob: bytes) -> Tuple[RunConfig, Dict[str, np.ndarray]]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError("not an SMRN checkpoint")
    payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if checksum(payload) != stored:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    try:
        version, n = struct.unpack_from("<II", payload, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        cfg = RunConfig.loads(payload[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            state[name] = arr.astype(np.float32)
        if pos != len(payload):
            raise CheckpointError("trailing bytes after tensor table")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return cfg, state


def save(path: str, cfg: RunConfig, state: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(cfg, state))


def load(path: str) -> Tuple[RunConfig, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_model(path: str, model) -> None:
    save(path, model.cfg, model.state())


def load_model(path: str) -> SMRNet:
    cfg, state = load(path)
    model = SMRNet(cfg)
    model.load_state(state)
    return model
