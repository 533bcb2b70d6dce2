"""Netpbm I/O, Gaussian blur and bilinear resampling.

Only binary P5 (greyscale) and P6 (RGB) with maxval 255 are supported.
Loaders return float64 arrays scaled to [0, 1]; savers take values on the
0-255 scale and round half-up.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.ndimage import correlate1d

from .errors import FormatError, IoError

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc


def _parse_header(data: bytes):
    """Return (magic, width, height, maxval, offset of first pixel byte)."""
    if len(data) < 2:
        raise FormatError("file too short for a netpbm header", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"expected magic P5 or P6, found {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError("truncated header", pos)
        ch = data[pos : pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append((int(data[start:pos]), start))
        else:
            raise FormatError(f"unexpected byte {ch!r} in header", pos)
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise FormatError("header must end with a single whitespace byte", pos)
    (width, w_at), (height, h_at), (maxval, m_at) = fields
    if width <= 0:
        raise FormatError("width must be positive", w_at)
    if height <= 0:
        raise FormatError("height must be positive", h_at)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)", m_at)
    return magic, width, height, maxval, pos + 1


def _load(path, want: bytes) -> np.ndarray:
    data = _read_bytes(path)
    magic, width, height, _, start = _parse_header(data)
    if magic != want:
        raise FormatError(f"expected {want.decode()} file, found {magic.decode()}", 0)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(data) - start < need:
        raise FormatError(f"pixel data truncated: need {need} bytes", len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=start).astype(np.float64) / 255.0
    if channels == 1:
        return pixels.reshape(height, width)
    return np.ascontiguousarray(pixels.reshape(height, width, 3).transpose(2, 0, 1))


def load_pgm(path) -> np.ndarray:
    """Load a P5 file as an ``[H, W]`` grid in [0, 1]."""
    return _load(path, b"P5")


def load_ppm(path) -> np.ndarray:
    """Load a P6 file as a channel-major ``[3, H, W]`` image in [0, 1]."""
    return _load(path, b"P6")


def to_bytes(values) -> np.ndarray:
    """Round 0-255 reals half-up to uint8; out-of-range input is an error."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot serialise non-finite values")
    if values.size and (values.min() < 0 or values.max() > 255):
        raise ValueError("values must lie in [0, 255]")
    return np.floor(values + 0.5).astype(np.uint8)


def _write(path, header: bytes, payload: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def save_pgm(grid, path):
    """Write an ``[H, W]`` grid of 0-255 values as P5."""
    grid = to_bytes(grid)
    if grid.ndim != 2:
        raise ValueError(f"save_pgm needs a 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    _write(path, b"P5\n%d %d\n255\n" % (w, h), grid.tobytes())


def save_ppm(image, path):
    """Write a channel-major ``[3, H, W]`` image of 0-255 values as P6."""
    image = to_bytes(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"save_ppm needs a [3, H, W] image, got shape {image.shape}")
    _, h, w = image.shape
    _write(path, b"P6\n%d %d\n255\n" % (w, h), image.transpose(1, 2, 0).tobytes())


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian truncated at ceil(3 sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(image, radius: float) -> np.ndarray:
    """Separable Gaussian blur with standard deviation ``radius`` pixels.

    Works on ``[H, W]`` grids and channel-major ``[C, H, W]`` images; edges
    are handled by replicating the border pixel. ``radius == 0`` returns the
    input unchanged.
    """
    if radius < 0:
        raise ValueError("blur radius must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if radius == 0:
        return image.copy()
    kernel = gaussian_kernel(radius)
    out = correlate1d(image, kernel, axis=-1, mode="nearest")
    return correlate1d(out, kernel, axis=-2, mode="nearest")


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres (align_corners=False), clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(grid, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling of the last two axes to ``(target_h, target_w)``."""
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target size must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[-2:]
    if (h, w) == (target_h, target_w):
        return grid.copy()
    y0, y1, fy = _axis_weights(h, target_h)
    x0, x1, fx = _axis_weights(w, target_w)
    rows = grid[..., y0, :] * (1 - fy)[:, None] + grid[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx
