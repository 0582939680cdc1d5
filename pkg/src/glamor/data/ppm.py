"""Binary netpbm codecs: P6 (RGB) and P5 (gray), 8-bit only."""

from __future__ import annotations

import os

import numpy as np

from ..errors import FormatError

_WHITESPACE = b" \t\r\n"


def _read_header(buf):
    """Parse magic, width, height, maxval. Returns (magic, w, h, maxval, data offset)."""
    if len(buf) < 2 or buf[:1] != b"P" or buf[1:2] not in (b"5", b"6"):
        raise FormatError("not a binary PPM/PGM file (expected P5 or P6)", 0)
    magic = buf[:2].decode()
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1] in (b" ", b"\t", b"\r", b"\n", b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                    pos += 1
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("truncated or malformed header", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise FormatError("header must end with a single whitespace byte", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"invalid dimensions {w}x{h}", 2)
    if maxval != 255:
        raise FormatError(f"only 8-bit images (maxval 255) are supported, got {maxval}", pos - 1)
    return magic, w, h, maxval, pos


def read_pnm(path) -> np.ndarray:
    """Decode P6 to (3, H, W) or P5 to (1, H, W) uint8."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_pnm(buf)


def decode_pnm(buf: bytes) -> np.ndarray:
    magic, w, h, _, pos = _read_header(buf)
    ch = 3 if magic == "P6" else 1
    need = w * h * ch
    if len(buf) - pos < need:
        raise FormatError(f"pixel data truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, ch).transpose(2, 0, 1).copy()


def _to_bytes(img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return img


def encode_ppm(img) -> bytes:
    """(3, H, W) uint8, or floats in [0, 1], to P6 bytes."""
    img = _to_bytes(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes()


def encode_pgm(img) -> bytes:
    img = _to_bytes(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) image, got {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def _write(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(payload)


def write_ppm(path, img):
    _write(path, encode_ppm(img))


def write_pgm(path, img):
    _write(path, encode_pgm(img))
