"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GLMR"                magic
    u32                    format version (1)
    u32                    metadata length L
    L bytes                UTF-8 JSON: {"model": ModelConfig, "tensors": [{name, shape, dtype}],
                                         "training": {...}}
    tensor data            raw IEEE-754 buffers ("f32" or "f64") in metadata order

Parameters and batch-norm running statistics are both stored.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .model import GlamorNet, ModelConfig
from .tensor import Precision

MAGIC = b"GLMR"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def encode_checkpoint(net: GlamorNet, training=None) -> bytes:
    state = net.state_dict()
    tag = net.precision.value
    tensors = [{"name": k, "shape": list(v.shape), "dtype": tag} for k, v in state.items()]
    meta = json.dumps({"model": net.config.to_dict(), "tensors": tensors,
                       "training": training or {}}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    parts += [np.ascontiguousarray(v, dtype=_DTYPES[tag]).tobytes() for v in state.values()]
    return b"".join(parts)


def save_checkpoint(net: GlamorNet, path, training=None):
    payload = encode_checkpoint(net, training)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def decode_checkpoint(buf: bytes):
    """Parse checkpoint bytes into (net, training metadata). Nothing is built on error."""
    if len(buf) < 12:
        raise FormatError("file too short for a checkpoint header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 12 + meta_len > len(buf):
        raise FormatError(f"metadata block of {meta_len} bytes runs past end of file", 8)
    try:
        meta = json.loads(buf[12:12 + meta_len].decode("utf-8"))
        tensors = meta["tensors"]
        config = ModelConfig.from_dict(meta["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"unreadable metadata ({exc})", 12) from None

    offset = 12 + meta_len
    state = {}
    precision = None
    for t in tensors:
        dtype = _DTYPES.get(t.get("dtype"))
        if dtype is None:
            raise FormatError(f"tensor {t.get('name')!r}: unknown dtype {t.get('dtype')!r}", offset)
        precision = precision or t["dtype"]
        n = int(np.prod(t["shape"])) * dtype.itemsize
        if offset + n > len(buf):
            raise FormatError(f"tensor {t['name']!r} truncated", len(buf))
        state[t["name"]] = np.frombuffer(buf, dtype=dtype, count=n // dtype.itemsize,
                                         offset=offset).reshape(t["shape"])
        offset += n
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after tensor data", offset)

    try:
        net = GlamorNet(config, seed=0, precision=Precision.of(precision or "f32"))
        net.load_state_dict(state)
    except (ConfigError, ShapeError) as exc:
        raise FormatError(f"tensors do not match the stored model config ({exc})", 12) from None
    return net, meta.get("training", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_checkpoint(buf)
