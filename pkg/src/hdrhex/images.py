"""Float (PFM) and 8-bit (PNG) image files.

PFM layout: ASCII header "PF", "<width> <height>", scale line (negative =
little-endian), then float32 rows bottom-to-top. PNG is 8-bit RGB without
alpha via Pillow. LDR images quantize as round(255 * c) and de-quantize as
byte / 255.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DataError


def write_pfm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image as little-endian PFM."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"{path}: PFM writer expects (H, W, 3), "
                        f"got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a color PFM -> (H, W, 3) float32."""
    try:
        with open(path, "rb") as fh:
            tag = fh.readline().strip()
            if tag != b"PF":
                raise DataError(f"{path}: not a color PFM (header {tag!r})")
            dims = fh.readline().split()
            if len(dims) != 2:
                raise DataError(f"{path}: malformed PFM dimension line")
            w, h = int(dims[0]), int(dims[1])
            scale = float(fh.readline())
            buf = fh.read(w * h * 3 * 4)
            if len(buf) != w * h * 3 * 4:
                raise DataError(f"{path}: truncated PFM payload")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(buf, dtype=dtype).reshape(h, w, 3)
    return np.flipud(img).astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 or [0,1] float image as 8-bit RGB PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = quantize(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"{path}: PNG writer expects (H, W, 3), "
                        f"got {image.shape}")
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG -> (H, W, 3) uint8."""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise DataError(f"{path}: expected 8-bit RGB, got {img.mode}")
            return np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def quantize(image: np.ndarray) -> np.ndarray:
    """[0,1] floats -> bytes by round(255 * c)."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255) \
        .astype(np.uint8)


def dequantize(image: np.ndarray) -> np.ndarray:
    """bytes -> floats in [0,1] by byte / 255."""
    return np.asarray(image, dtype=np.float64) / 255.0
