"""Binary PPM (P6) codec plus a fallback to Pillow for other formats."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from fddf.disentangle import RgbImage, pad_to_even
from fddf.errors import FormatError, ImageError, ParseError


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = n if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PPM header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode a P6 buffer with maxval 255 into an (H, W, 3) uint8 array."""
    if buf[:2] != b"P6":
        raise ParseError("missing P6 magic", 0)
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        token, pos = _read_token(buf, pos)
        if not token.isdigit():
            raise ParseError(f"non-numeric header field {token!r}", start)
        fields.append(int(token))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"invalid dimensions {width}x{height}", pos)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", pos)
    pos += 1
    expected = width * height * 3
    payload = buf[pos : pos + expected]
    if len(payload) < expected:
        raise ParseError(f"truncated pixel payload: {len(payload)} of {expected} bytes", pos + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_ppm(path: str | os.PathLike, img: RgbImage | np.ndarray) -> None:
    pixels = img.pixels if isinstance(img, RgbImage) else img
    Path(path).write_bytes(encode_ppm(pixels))


def load_image(path: str | os.PathLike) -> RgbImage:
    """Load an RGB image, padding odd dimensions by edge replication."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        pixels = decode_ppm(data)
    else:
        pixels = _decode_with_pillow(path)
    pixels = pad_to_even(pixels)
    if min(pixels.shape[:2]) < 8:
        raise ImageError(f"{path}: image smaller than 8x8")
    return RgbImage(pixels)


def _decode_with_pillow(path: Path) -> np.ndarray:
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError as exc:  # pragma: no cover - Pillow ships with the environment
        raise FormatError(f"{path}: only binary PPM (P6) is supported without Pillow") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: unsupported image format") from exc
