"""Binary checkpoint format.

Layout (little-endian)::

    b"MFRT"  u32 version
    u32 len, config JSON (utf-8)
    u32 entry count
    per entry: u32 len, name (utf-8); u32 ndim; ndim x u32 dims; float64 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..config import ModelConfig
from ..model import SegmentationModel

MAGIC = b"MFRT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or config mismatch."""


def encode_checkpoint(config: ModelConfig, state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = config.to_json().encode()
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    config = ModelConfig.from_json(take_bytes(n).decode())
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (n,) = take("<I")
        name = take_bytes(n).decode()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take_bytes(8 * size), dtype="<f8").reshape(shape).astype(float)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return config, state


def save_checkpoint(path, model: SegmentationModel) -> None:
    Path(path).write_bytes(encode_checkpoint(model.config, model.state_dict()))


def load_checkpoint(path, config: ModelConfig | None = None) -> SegmentationModel:
    """Rebuild the model stored at ``path``.

    When ``config`` is given it must equal the stored config exactly.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    stored, state = decode_checkpoint(blob)
    if config is not None and config != stored:
        raise CheckpointError("checkpoint config does not match the requested model config")
    model = SegmentationModel(stored)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint tensors do not fit the model: {exc}") from exc
    model.eval()
    return model
