"""Binary checkpoint container for model parameters.

Layout (all integers little-endian)::

    magic        8 bytes  b"BIDISUM\\x00"
    version      u32
    config_len   u32, then config_len bytes of UTF-8 "key=value" lines
    n_tensors    u32
    per tensor:  u16 name_len, name (UTF-8), u8 ndim, ndim x u32 dims,
                 prod(dims) x float64
    checksum     32 bytes, SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, expected_shapes, init_params

MAGIC = b"BIDISUM\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_text(config: ModelConfig) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items()).encode("utf-8")


def dumps(params: ModelParams, config: ModelConfig) -> bytes:
    params.check_shapes(config)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = _config_text(config)
    parts += [struct.pack("<I", len(cfg)), cfg]
    named = params.named_tensors()
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(params, config))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> tuple[ModelParams, ModelConfig]:
    if len(blob) < len(MAGIC) + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    cfg_lines = r.take(cfg_len).decode("utf-8").splitlines()
    config = ModelConfig.from_dict(dict(line.split("=", 1) for line in cfg_lines if line))
    (n,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    expected = expected_shapes(config)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names do not match config (missing {missing}, unexpected {extra})")
    params = init_params(config, seed=0)
    for name, t in params.named_tensors():
        arr = tensors[name]
        if arr.shape != expected[name]:
            raise CheckpointError(f"{name}: stored shape {arr.shape}, config expects {expected[name]}")
        t.data = arr.copy()
        t.grad = None
    params.check_shapes(config)
    return params, config


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


__all__ = ["CheckpointError", "FORMAT_VERSION", "dumps", "loads", "save_checkpoint", "load_checkpoint"]

