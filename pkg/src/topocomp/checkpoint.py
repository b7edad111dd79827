"""Binary model checkpoints.

Layout (little-endian)::

    magic      10 bytes  b"TGSC-MODEL"
    version    u16
    kind       u16 length + utf-8
    record     u32 length + utf-8 JSON (sorted keys): hyperparameters,
               training config, normalization constants, best epoch
    tensors    u32 count, then per tensor (sorted by name):
               u16 name length + utf-8 name, u8 ndim, ndim x u32 dims,
               float32 values in row-major order
    digest     32 bytes, SHA-256 of everything above

Saving the result of :func:`load_checkpoint` reproduces the original bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tensor
from .errors import FormatError
from .ingestion import _atomic_write
from .models import Model, build_model

MAGIC = b"TGSC-MODEL"
VERSION = 1
DIGEST_BYTES = 32


@dataclass
class Checkpoint:
    kind: str
    hyper: dict
    params: ParamStore
    extra: dict = field(default_factory=dict)

    def model(self) -> Model:
        return build_model(self.hyper)


def _pack_str(s: str, fmt: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    record = json.dumps({"hyper": ckpt.hyper, "extra": ckpt.extra}, sort_keys=True, separators=(",", ":"))
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_str(ckpt.kind, "<H"), _pack_str(record, "<I")]
    names = sorted(ckpt.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name].data, dtype="<f4")
        parts.append(_pack_str(name, "<H"))
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.off = blob, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"checkpoint string is not utf-8: {exc}") from exc


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:len(MAGIC)]!r}")
    if len(blob) < len(MAGIC) + 2 + DIGEST_BYTES:
        raise FormatError("checkpoint truncated")
    body, digest = blob[:-DIGEST_BYTES], blob[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint digest mismatch (file corrupted or edited)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    kind = r.string("<H")
    try:
        record = json.loads(r.string("<I"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint record is not JSON: {exc}") from exc
    params = ParamStore()
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.string("<H")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        params[name] = Tensor(values.astype(np.float32))
    if r.off != len(body):
        raise FormatError(f"{len(body) - r.off} trailing bytes in checkpoint")
    return Checkpoint(kind, record["hyper"], params, record.get("extra", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> bytes:
    blob = checkpoint_bytes(ckpt)
    _atomic_write(path, blob)
    return blob


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
