"""Versioned binary checkpoint container.

Layout (all integers little-endian u32)::

    b"FAPK" | version | meta_len | meta (UTF-8 JSON, sorted keys)
    | n_tensors | { name_len | name | ndim | dims... | f32 data } * n_tensors

Tensors are written in sorted name order so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"FAPK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict
    history: list[dict] = field(default_factory=list, repr=False, compare=False)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw_name = name.encode()
            buf.write(struct.pack("<I", len(raw_name)))
            buf.write(raw_name)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise ValidationError("truncated checkpoint")
            chunk = view[pos : pos + n]
            pos += n
            return chunk

        def u32():
            return struct.unpack("<I", take(4))[0]

        if bytes(take(4)) != MAGIC:
            raise ValidationError("not a FAPK checkpoint (bad magic)")
        version = u32()
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(take(u32())).decode())
        tensors = {}
        for _ in range(u32()):
            name = bytes(take(u32())).decode()
            ndim = u32()
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        if pos != len(view):
            raise ValidationError("trailing bytes after checkpoint payload")
        return cls(tensors, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> Checkpoint:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"checkpoint {path} does not exist")
        return cls.from_bytes(path.read_bytes())
