"""Binary checkpoint format.

    magic    4s   b"FVX1"
    version  u32
    count    u32  number of tensors
    flags    u32  bit 0: optimizer state follows
    name table, per tensor:
        u16 name length, UTF-8 name, u8 kind code, u8 trainable, u8 ndim, ndim x u32 dims
    tensor data, per tensor in table order: little-endian float32, row-major
    optimizer block (if flagged):
        u32 epoch, f64 base_lr, f64 momentum, f64 gamma, u32 step,
        u32 velocity count, then per velocity: u16 name length, name, float32 data
        (shape taken from the matching parameter)
    crc32    u32  over every preceding byte

All integers are little-endian.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .optim import OptState
from .params import KINDS, Param, ParamSet

MAGIC = b"FVX1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_OPT = struct.Struct("<IdddI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParamSet, opt: OptState | None = None) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(params), 1 if opt is not None else 0)]
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BBB", KINDS.index(p.kind), int(p.trainable), p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
    for p in params:
        parts.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    if opt is not None:
        parts.append(_OPT.pack(opt.epoch, opt.base_lr, opt.momentum, opt.gamma, opt.step))
        parts.append(struct.pack("<I", len(opt.velocity)))
        for name, v in opt.velocity.items():
            if name not in params:
                raise CheckpointError(f"velocity for unknown tensor {name!r}")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint at offset {self.pos} (need {size} bytes)")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at offset {self.pos} (need {n} bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        buf = self.raw(4 * n)
        return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)


def load_checkpoint(data: bytes, expect: ParamSet | None = None) -> tuple[ParamSet, OptState | None]:
    """Parse checkpoint bytes; ``expect`` enforces a layout (names and shapes)."""
    if len(data) < _HEADER.size + 4:
        raise CheckpointError(f"truncated checkpoint at offset {len(data)}")
    magic, version, count, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    r = _Reader(data[:-4])
    r.pos = _HEADER.size
    table = []
    for _ in range(count):
        (n,) = r.take("<H")
        name = r.raw(n).decode("utf-8")
        kind, trainable, ndim = r.take("<BBB")
        if kind >= len(KINDS):
            raise CheckpointError(f"unknown kind code {kind} for {name!r} at offset {r.pos - 3}")
        dims = r.take(f"<{ndim}I") if ndim else ()
        table.append((name, KINDS[kind], bool(trainable), tuple(dims)))
    params = ParamSet()
    for name, kind, trainable, dims in table:
        params.add(Param(name, kind, r.floats(dims), trainable))
    opt = None
    if flags & 1:
        epoch, base_lr, momentum, gamma, step = r.take("<IdddI")
        (nv,) = r.take("<I")
        velocity = {}
        for _ in range(nv):
            (n,) = r.take("<H")
            name = r.raw(n).decode("utf-8")
            if name not in params:
                raise CheckpointError(f"velocity for unknown tensor {name!r} at offset {r.pos}")
            velocity[name] = r.floats(params[name].shape)
        opt = OptState(base_lr, momentum, gamma, step, epoch, velocity)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} unexpected bytes at offset {r.pos}")
    if zlib.crc32(r.data) != stored_crc:
        raise CheckpointError(f"checksum mismatch at offset {len(data) - 4}")
    if expect is not None:
        err = expect.same_layout(params)
        if err:
            raise CheckpointError(f"checkpoint does not fit the architecture: {err}")
    return params, opt
