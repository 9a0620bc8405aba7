"""8-bit RGB image files: binary PPM (P6) and PNG (truecolour, no interlace)."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..exceptions import ProtocolError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _as_rgb8(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    return np.ascontiguousarray(img)


def encode_ppm(image) -> bytes:
    img = _as_rgb8(image)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ProtocolError("not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    if len(body) != w * h * 3:
        raise ProtocolError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def _chunk(tag: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))


def encode_png(image) -> bytes:
    img = _as_rgb8(image)
    h, w, _ = img.shape
    raw = np.concatenate([np.zeros((h, 1), dtype=np.uint8), img.reshape(h, w * 3)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 9))
            + _chunk(b"IEND", b""))


def decode_png(data: bytes) -> np.ndarray:
    """Reads what :func:`encode_png` writes (8-bit RGB, filter type 0 rows)."""
    if not data.startswith(PNG_SIGNATURE):
        raise ProtocolError("missing PNG signature")
    pos = len(PNG_SIGNATURE)
    idat = b""
    w = h = None
    while pos < len(data):
        (length,) = struct.unpack_from(">I", data, pos)
        tag = data[pos + 4: pos + 8]
        body = data[pos + 8: pos + 8 + length]
        if tag == b"IHDR":
            w, h, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", body)
            if (depth, ctype, interlace) != (8, 2, 0):
                raise ProtocolError("only 8-bit RGB non-interlaced PNG is supported")
        elif tag == b"IDAT":
            idat += body
        elif tag == b"IEND":
            break
        pos += 12 + length
    if w is None:
        raise ProtocolError("PNG without IHDR")
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8).reshape(h, w * 3 + 1)
    if np.any(raw[:, 0] != 0):
        raise ProtocolError("PNG row filters other than None are not supported")
    return raw[:, 1:].reshape(h, w, 3).copy()


def write_image(path, image) -> Path:
    """Write by extension: ``.ppm`` or ``.png``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        path.write_bytes(encode_ppm(image))
    elif suffix == ".png":
        path.write_bytes(encode_png(image))
    else:
        raise ValueError(f"unsupported image extension {suffix!r}")
    return path


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    return decode_png(data) if path.suffix.lower() == ".png" else decode_ppm(data)
