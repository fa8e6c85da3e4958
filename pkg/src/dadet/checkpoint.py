"""Binary checkpoint container.

Little-endian layout::

    magic      9 bytes  b"DADETCKPT"
    version    uint16   1
    config     uint32 length + UTF-8 JSON of the DetectorConfig
    count      uint32   number of tensors
    per tensor:
        name   uint16 length + UTF-8
        ndim   uint8
        shape  ndim x uint32
        data   float64 x prod(shape)

Tensors are written in the model's parameter order, so equal models give
equal bytes.
"""
import json
import struct

import numpy as np

from .detector import Detector, DetectorConfig

MAGIC = b"DADETCKPT"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def dumps(model):
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, field):
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(field, f"truncated (need {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def unpack(self, fmt, field):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field))


def loads(buf):
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("magic", "not a checkpoint file")
    version, cfg_len = r.unpack("<HI", "version")
    if version != VERSION:
        raise CheckpointFormatError("version", f"unsupported version {version}")
    try:
        config = DetectorConfig.from_dict(json.loads(r.take(cfg_len, "config").decode("utf-8")))
    except CheckpointFormatError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointFormatError("config", str(exc)) from None
    model = Detector(config, seed=0)
    (count,) = r.unpack("<I", "count")
    if count != len(model.params):
        raise CheckpointFormatError("count", f"{count} tensors, config implies {len(model.params)}")
    for k in range(count):
        (n,) = r.unpack("<H", f"tensor[{k}].name")
        try:
            name = r.take(n, f"tensor[{k}].name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"tensor[{k}].name", "not UTF-8") from None
        if name not in model.params:
            raise CheckpointFormatError(f"tensor[{k}].name", f"unknown parameter {name!r}")
        (ndim,) = r.unpack("<B", f"{name}.ndim")
        shape = r.unpack(f"<{ndim}I", f"{name}.shape")
        expected = model.params[name].data.shape
        if tuple(shape) != expected:
            raise CheckpointFormatError(f"{name}.shape", f"{tuple(shape)} does not match config {expected}")
        size = int(np.prod(shape)) * 8
        data = np.frombuffer(r.take(size, f"{name}.data"), dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise CheckpointFormatError(f"{name}.data", "non-finite values")
        model.params[name].data = data
    if r.pos != len(r.buf):
        raise CheckpointFormatError("count", f"{len(r.buf) - r.pos} trailing bytes")
    return model


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
