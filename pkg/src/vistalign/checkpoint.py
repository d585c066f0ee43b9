"""Binary checkpoint format.

Layout (all little-endian)::

    b"VSTA"
    u32 version (= 1)
    u32 x 9  vocab_size, d_model, n_layers, n_heads, n_image_tokens,
             max_text_len, d_image_feat, seed_lo, seed_hi
    repeated until EOF:
        u16 name length, name bytes (utf-8)
        u64 element count
        f64 x count

The 64-bit seed is split into its low and high 32-bit halves.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params, param_shapes
from .tensor import Tensor

MAGIC = b"VSTA"
VERSION = 1
_CONFIG_FIELDS = (
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "n_image_tokens",
    "max_text_len",
    "d_image_feat",
)


class CheckpointError(ValueError):
    pass


def dumps(cfg: ModelConfig, params: Params) -> bytes:
    out = bytearray(MAGIC)
    vals = [getattr(cfg, f) for f in _CONFIG_FIELDS]
    vals += [cfg.seed & 0xFFFFFFFF, cfg.seed >> 32]
    out += struct.pack("<I", VERSION)
    out += struct.pack(f"<{len(vals)}I", *vals)
    for name, t in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<Q", t.size)
        out += t.data.astype("<f8").tobytes()
    return bytes(out)


def loads(buf: bytes) -> tuple[ModelConfig, Params]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    nf = len(_CONFIG_FIELDS) + 2
    try:
        vals = struct.unpack_from(f"<{nf}I", buf, 8)
    except struct.error:
        raise CheckpointError("truncated header") from None
    kw = dict(zip(_CONFIG_FIELDS, vals))
    cfg = ModelConfig(**kw, seed=vals[-2] | (vals[-1] << 32))
    shapes = param_shapes(cfg)
    pos = 8 + 4 * nf
    params: Params = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (count,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"truncated block {name!r}")
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            if name not in shapes or int(np.prod(shapes[name])) != count:
                raise CheckpointError(f"parameter {name!r} does not match the header config")
            params[name] = Tensor(data.reshape(shapes[name]), requires_grad=True)
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)}")
    return cfg, params


def save(path, cfg: ModelConfig, params: Params) -> None:
    Path(path).write_bytes(dumps(cfg, params))


def load(path) -> tuple[ModelConfig, Params]:
    return loads(Path(path).read_bytes())
