"""Dense rasters: validation, crops, bilinear resampling, gradients and LGRD files.

A grid is a ``numpy`` array of shape ``(height, width, channels)``. Every
interpolation in the package shares one pixel-center convention: output
pixel ``i`` of a length-``n`` axis samples the normalised source coordinate
``(i + 0.5) / n``, so in source-pixel units a window ``[start, start + size)``
resampled to ``out`` pixels reads position ``start + (i + 0.5) * size / out - 0.5``.
Positions outside the valid sample range are clamped to the border pixel.
This matches ``torch.nn.functional.interpolate(..., align_corners=False)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LGRD"
VERSION = 1
DTYPE_FLOAT32 = 1
HEADER = struct.Struct("<4sIIIII")


class GridError(ValueError):
    """Rejected grid input (bad shape, non-finite values, invalid window)."""


class RasterFormatError(ValueError):
    """Malformed LGRD file."""


def as_grid(a, name: str = "grid") -> np.ndarray:
    """Validate ``a`` as an H x W x C finite raster; 2-D input gains a channel axis."""
    g = np.asarray(a)
    if g.ndim == 2:
        g = g[..., None]
    if g.ndim != 3:
        raise GridError(f"{name}: expected (height, width, channels), got shape {g.shape}")
    if min(g.shape) < 1:
        raise GridError(f"{name}: all dimensions must be >= 1, got {g.shape}")
    if not np.issubdtype(g.dtype, np.floating):
        g = g.astype(np.float64)
    if not np.all(np.isfinite(g)):
        raise GridError(f"{name}: contains NaN or Inf")
    return g


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    crop_height: int
    crop_width: int
    output_height: int
    output_width: int

    def validate(self, height: int, width: int) -> None:
        if min(self.crop_height, self.crop_width, self.output_height, self.output_width) < 1:
            raise GridError(f"crop sizes must be positive: {self}")
        if self.top < 0 or self.left < 0:
            raise GridError(f"crop offset must be nonnegative: {self}")
        if self.top + self.crop_height > height or self.left + self.crop_width > width:
            raise GridError(f"crop window {self} exceeds source {height}x{width}")
        # aspect preserved up to one pixel of rounding in the crop window
        expected_w = self.crop_height * self.output_width / self.output_height
        if abs(expected_w - self.crop_width) > 1.0 + 1e-9:
            raise GridError(f"crop is not aspect-preserving: {self}")

    @property
    def scale_y(self) -> float:
        return self.output_height / self.crop_height

    @property
    def scale_x(self) -> float:
        return self.output_width / self.crop_width

    @classmethod
    def full(cls, height: int, width: int) -> "CropSpec":
        return cls(0, 0, height, width, height, width)


def _axis_weights(start: float, size: float, n_src: int, n_out: int):
    pos = start + (np.arange(n_out) + 0.5) * size / n_out - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def _bilinear_window(g: np.ndarray, top, left, ch, cw, out_h, out_w) -> np.ndarray:
    h, w, _ = g.shape
    y0, y1, fy = _axis_weights(top, ch, h, out_h)
    x0, x1, fx = _axis_weights(left, cw, w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows0 = g[y0]
    rows1 = g[y1]
    top_row = rows0[:, x0] * (1 - fx) + rows0[:, x1] * fx
    bot_row = rows1[:, x0] * (1 - fx) + rows1[:, x1] * fx
    return top_row * (1 - fy) + bot_row * fy


def crop_apply(src, spec: CropSpec) -> np.ndarray:
    """Bilinearly resample the crop window of ``src`` to the crop's output size.

    Channel values are not rescaled; flow channels must be rescaled by the caller.
    """
    g = as_grid(src, "src")
    spec.validate(g.shape[0], g.shape[1])
    if (spec.top, spec.left) == (0, 0) and (spec.crop_height, spec.crop_width) == g.shape[:2] \
            and (spec.output_height, spec.output_width) == g.shape[:2]:
        return g.copy()
    return _bilinear_window(g, spec.top, spec.left, spec.crop_height, spec.crop_width,
                            spec.output_height, spec.output_width).astype(g.dtype, copy=False)


def resample_bilinear(src, out_h: int, out_w: int) -> np.ndarray:
    g = as_grid(src, "src")
    if out_h < 1 or out_w < 1:
        raise GridError(f"output size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == g.shape[:2]:
        return g.copy()
    h, w, _ = g.shape
    return _bilinear_window(g, 0, 0, h, w, out_h, out_w).astype(g.dtype, copy=False)


def spatial_gradient_abs(g, axis: str) -> np.ndarray:
    """Absolute forward difference along ``axis`` ('x' = columns, 'y' = rows).

    The last row/column repeats the final difference so the output keeps the input size.
    """
    g = as_grid(g)
    if axis == "x":
        if g.shape[1] < 2:
            raise GridError("x-gradient needs width >= 2")
        d = np.abs(np.diff(g, axis=1))
        return np.concatenate([d, d[:, -1:]], axis=1)
    if axis == "y":
        if g.shape[0] < 2:
            raise GridError("y-gradient needs height >= 2")
        d = np.abs(np.diff(g, axis=0))
        return np.concatenate([d, d[-1:]], axis=0)
    raise GridError(f"axis must be 'x' or 'y', got {axis!r}")


def raster_write(g, path) -> None:
    g = as_grid(g)
    h, w, c = g.shape
    payload = np.ascontiguousarray(g, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, h, w, c, DTYPE_FLOAT32))
        fh.write(payload)


def raster_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise RasterFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, h, w, c, dtype = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise RasterFormatError(f"{path}: unsupported dtype tag {dtype}")
    if min(h, w, c) == 0:
        raise RasterFormatError(f"{path}: zero dimension in header ({h}x{w}x{c})")
    expected = h * w * c * 4
    payload = raw[HEADER.size:]
    if len(payload) < expected:
        raise RasterFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise RasterFormatError(
            f"{path}: payload length {len(payload)} does not match dims {h}x{w}x{c}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
