"""Binary PPM (P6 colour) and PGM-style P5 (grayscale) image files.

Colour images are linear RGB in memory and sRGB-like gamma 2.2 encoded on disk.
Grayscale masks are stored linearly: they are coverage values, not colours.
"""
from __future__ import annotations

import numpy as np

GAMMA = 2.2


class ImageFormatError(ValueError):
    pass


def encode_srgb8(image: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * x ** (1.0 / GAMMA)).astype(np.uint8)


def decode_srgb8(data: np.ndarray) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) / 255.0) ** GAMMA


def quantize(image: np.ndarray) -> np.ndarray:
    """What an image looks like after a write/read round trip."""
    return decode_srgb8(encode_srgb8(image))


def _write(path, magic: bytes, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()}, found {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images are supported")
    size = w * h * channels
    body = np.frombuffer(raw, dtype=np.uint8, count=-1, offset=pos)
    if body.size < size:
        raise ImageFormatError(f"{path}: truncated pixel data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return body[:size].reshape(shape)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError("P6 images must be H x W x 3")
    _write(path, b"P6", encode_srgb8(image))


def read_ppm(path) -> np.ndarray:
    return decode_srgb8(_read(path, b"P6", 3))


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ImageFormatError("P5 images must be H x W")
    _write(path, b"P5", np.round(255.0 * np.clip(mask, 0.0, 1.0)).astype(np.uint8))


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1).astype(np.float64) / 255.0
