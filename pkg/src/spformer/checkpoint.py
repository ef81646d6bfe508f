"""Binary model archive.

Layout (all integers little-endian)::

    b"SPXF"  u32 version  u32 blob_len  blob (UTF-8 key=value lines)
    repeated, sorted by name:
        u16 name_len  name  u8 rank  u32 dims[rank]  f32 payload

Config keys are the :class:`ModelConfig` field names.  Keys starting with
``meta.`` carry free-form run information (epoch, seed, ...) and are
returned separately.
"""
from __future__ import annotations

import dataclasses
import struct
import typing
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ConfigError, ModelConfig, SPFormer
from .tensor import Tensor

MAGIC = b"SPXF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


def config_to_text(cfg: ModelConfig, meta: Optional[Dict[str, object]] = None) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k}={v}")
    return "\n".join(lines) + "\n"


def coerce_value(kind, raw: str):
    if kind is bool:
        if raw not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw in ("True", "true", "1")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if typing.get_origin(kind) is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config_text(text: str, source: str = "<config>", base: Optional[ModelConfig] = None
                      ) -> Tuple[ModelConfig, Dict[str, str]]:
    """Parse key=value lines into a config.  Unknown keys are errors.

    Blank lines and ``#`` comments are skipped.  Error messages carry the
    1-based line number.
    """
    hints = typing.get_type_hints(ModelConfig)
    values: Dict[str, object] = {}
    meta: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("meta."):
            meta[key[5:]] = raw
            continue
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = coerce_value(hints[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = dataclasses.replace(base, **values) if base else ModelConfig(**values)
    return cfg, meta


def encode(cfg: ModelConfig, params: Dict[str, Tensor], meta: Optional[Dict[str, object]] = None) -> bytes:
    blob = config_to_text(cfg, meta).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name in sorted(params):
        arr = np.asarray(params[name].data, dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Tuple[ModelConfig, Dict[str, Tensor], Dict[str, str]]:
    rd = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"not a checkpoint: magic {data[:4]!r}")
    rd.take(4)
    version, blob_len = rd.unpack("<II")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        text = rd.take(blob_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config blob is not UTF-8: {exc}") from None
    cfg, meta = parse_config_text(text, "<checkpoint>")
    params: Dict[str, Tensor] = {}
    prev = None
    while rd.pos < len(data):
        (n,) = rd.unpack("<H")
        name = rd.take(n).decode("utf-8")
        if prev is not None and name <= prev:
            raise CheckpointError(f"parameter names not sorted/unique at {name!r}")
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
        prev = name
    return cfg, params, meta


def save_checkpoint(model: SPFormer, path, meta: Optional[Dict[str, object]] = None) -> None:
    Path(path).write_bytes(encode(model.config, model.params, meta))


def load_checkpoint(path) -> SPFormer:
    cfg, params, meta = decode(Path(path).read_bytes())
    model = SPFormer(cfg, params)
    model.meta = meta
    return model
