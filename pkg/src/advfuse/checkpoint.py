"""Binary parameter checkpoints with atomic writes.

Layout: magic "VLLA", format version (u16), a 64-bit FNV-1a digest of the
canonical model-config serialization, then one record per tensor in
parameter order: name length (u32), name bytes, rank (u32), each dim (u32),
and the little-endian float64 payload. Every integer is little-endian.
"""

import os
import struct
from dataclasses import fields

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError
from .model import ModelParams, _param_shapes

MAGIC = b"VLLA"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def canonical_config(config):
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(config)]
    return "model-config-v1\n" + "\n".join(lines)


def fnv1a(data):
    """64-bit FNV-1a over raw bytes."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def config_digest(config):
    return fnv1a(canonical_config(config).encode("utf-8"))


def save_checkpoint(params, path):
    """Write params to path; a crash leaves either no file or a valid one."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<Q", config_digest(params.config))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        v = tensor.values
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", v.ndim)
        blob += struct.pack(f"<{v.ndim}I", *v.shape)
        blob += np.ascontiguousarray(v, dtype="<f8").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def done(self):
        return self.pos == len(self.data)


def load_checkpoint(path, config):
    """Read a checkpoint written for exactly this model config."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint")
    version = r.u16()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.u64()
    if digest != config_digest(config):
        raise CheckpointError(
            f"checkpoint {path} was written for a different model config"
        )
    expected = {name: shape for name, shape, _ in _param_shapes(config)}
    tensors = {}
    while not r.done():
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(8 * count)
        values = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(
            np.float64, copy=True)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in {path}")
        if shape != expected[name]:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, config expects {expected[name]}"
            )
        tensors[name] = Tensor(values, requires_grad=True)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing tensors: {missing[:3]}")
    ordered = {name: tensors[name] for name, _, _ in _param_shapes(config)}
    return ModelParams(config, ordered)
