"""Binary PPM (P6) and PGM (P5) reading and writing.

Headers may contain comments and arbitrary whitespace.  A parsed image keeps
its original header bytes, so writing back an unmodified image reproduces
the file byte for byte.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np


class ImageFormatError(ValueError):
    """File content is not a well-formed P5/P6 image."""


@dataclass
class PpmImage:
    """Pixel array ``(H, W, 3)`` for P6 or ``(H, W)`` for P5, plus the header."""

    pixels: np.ndarray
    maxval: int = 255
    header: Optional[bytes] = None

    @property
    def magic(self) -> bytes:
        return b"P6" if self.pixels.ndim == 3 else b"P5"

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / self.maxval


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def _read_header(data: bytes):
    """Return ``(magic, width, height, maxval, payload_offset)``."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("malformed header")
        fields.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("header must end in a single whitespace byte")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad dimensions or maxval: {width}x{height}, {maxval}")
    return magic, width, height, maxval, pos + 1


def _parse(data: bytes) -> PpmImage:
    magic, width, height, maxval, pos = _read_header(data)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    payload = data[pos:]
    if len(payload) != need:
        raise ImageFormatError(f"payload is {len(payload)} bytes, expected {need}")
    px = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    if px.max(initial=0) > maxval:
        raise ImageFormatError("sample exceeds maxval")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return PpmImage(px.reshape(shape), maxval, data[:pos])


def _header_matches(img: PpmImage) -> bool:
    if img.header is None:
        return False
    try:
        magic, w, h, maxval, pos = _read_header(img.header + b"\0")
    except ImageFormatError:
        return False
    return pos == len(img.header) and (magic, w, h, maxval) == (img.magic, img.width, img.height, img.maxval)


def _encode(img: PpmImage) -> bytes:
    px = np.asarray(img.pixels)
    if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
        raise ImageFormatError(f"cannot encode pixel array of shape {px.shape}")
    if px.min(initial=0) < 0 or px.max(initial=0) > img.maxval:
        raise ImageFormatError("pixel values outside [0, maxval]")
    if _header_matches(img):
        header = img.header
    else:
        header = b"%s\n%d %d\n%d\n" % (img.magic, img.width, img.height, img.maxval)
    dtype = ">u2" if img.maxval > 255 else "u1"
    return header + px.astype(dtype).tobytes()


PathLike = Union[str, Path]


def read_image(path: PathLike) -> PpmImage:
    return _parse(Path(path).read_bytes())


def write_image(path: PathLike, img: PpmImage) -> None:
    Path(path).write_bytes(_encode(img))


def read_ppm(path: PathLike) -> PpmImage:
    """Read a P6 colour image; only maxval 255 is accepted."""
    img = read_image(path)
    if img.magic != b"P6" or img.maxval != 255:
        raise ImageFormatError(f"{path}: expected an 8-bit P6 image")
    return img


def write_ppm(path: PathLike, rgb) -> None:
    """Write ``(H, W, 3)`` data as 8-bit P6.  Floats are taken to be in [0, 1]."""
    if isinstance(rgb, PpmImage):
        write_image(path, rgb)
        return
    write_image(path, PpmImage(to_uint8(rgb)))


def to_uint8(rgb) -> np.ndarray:
    arr = np.asarray(rgb)
    if arr.dtype.kind == "f":
        arr = np.clip(np.rint(arr * 255.0), 0, 255)
    return arr.astype(np.uint8)


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a P5 image and return its samples as an integer array ``(H, W)``."""
    img = read_image(path)
    if img.magic != b"P5":
        raise ImageFormatError(f"{path}: expected a P5 image")
    return img.pixels.astype(np.int64)


def write_pgm(path: PathLike, labels, maxval: int = 65535) -> None:
    """Write an integer map as P5; maxval above 255 gives big-endian 16-bit samples."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ImageFormatError(f"label map must be 2-d, got shape {arr.shape}")
    write_image(path, PpmImage(arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval))
