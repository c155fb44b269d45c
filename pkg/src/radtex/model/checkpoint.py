"""Binary checkpoint format.

Layout (little-endian): magic ``RTXCKPT1``, u32 record count, then per record
u16 name length, UTF-8 name, u8 dtype code, u8 rank, rank × u32 dims, raw
values.  Dtype codes: 0 = float32, 1 = uint8 bytes, 2 = float64.  The JSON
config header is a uint8 record named ``__config__``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..textpipe import Vocabulary
from .backbone import BackboneConfig
from .layers import Module
from .captioner import ClassifierModel, ModelConfig, CaptioningModel

MAGIC = b"RTXCKPT1"
CONFIG_RECORD = "__config__"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}


class CheckpointFormatError(ValueError):
    pass


def write_records(path, records: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_records(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic or unsupported version")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise CheckpointFormatError(f"{path}: unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _CODES[code]
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims).copy()
        if name in records:
            raise CheckpointFormatError(f"{path}: duplicate record {name}")
        records[name] = arr
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after {count} records")
    return records


def save_checkpoint(model: Module, path, extra: dict | None = None) -> None:
    header = model.header()
    if extra:
        header["extra"] = extra
    records = {CONFIG_RECORD: np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    records.update(model.state_dict())
    write_records(path, records)


def read_header(records: dict[str, np.ndarray]) -> dict:
    if CONFIG_RECORD not in records:
        raise CheckpointFormatError("checkpoint lacks a config header")
    return json.loads(records[CONFIG_RECORD].tobytes().decode("utf-8"))


def build_model(header: dict) -> Module:
    if header["kind"] == CaptioningModel.kind:
        vocab = Vocabulary(header["vocab"]) if header.get("vocab") else None
        return CaptioningModel(ModelConfig.from_dict(header["model"]), vocab, max_caption_len=header["max_caption_len"])
    if header["kind"] == ClassifierModel.kind:
        return ClassifierModel(BackboneConfig(**header["backbone"]), header["head_width"], dtype=header["dtype"])
    raise CheckpointFormatError(f"unknown model kind {header['kind']!r}")


def load_checkpoint(path) -> Module:
    records = read_records(path)
    model = build_model(read_header(records))
    try:
        model.load_state_dict(records, strict=True)
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from None
    return model


def load_backbone(path, model: Module) -> None:
    """Overwrite ``model``'s backbone from a checkpoint; other parameters are untouched."""
    records = read_records(path)
    own = {k for k in model.state_dict() if k.startswith("backbone.")}
    missing = sorted(own - records.keys())
    if missing:
        raise CheckpointFormatError(f"{path}: missing backbone tensors {missing[:3]}")
    model.load_state_dict({k: records[k] for k in own}, strict=False)
