"""Image resampling primitives shared by the dataset and augmentation code.

Everything here works on plain 2-D numpy arrays and keeps the coordinate
conventions in one place:

* Sampling positions are (row, col) float coordinates in pixel units, where
  integer coordinates land exactly on pixel centres.
* Out-of-range positions are clamped to the border pixel (replicate padding),
  which is what a warp of a medical image should do at the frame edge.
* Nearest-neighbour rounding is ``floor(x + 0.5)``: an exact half tie goes to
  the higher index.  This keeps label images reproducible across platforms
  instead of depending on a library's banker's rounding.
* Resizing maps output pixel ``i`` to source position
  ``(i + 0.5) * (in / out) - 0.5`` (half-pixel centres), so a same-size resize
  is an exact identity and a 2x bilinear reduction averages 2x2 blocks.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

__all__ = [
    "sample_bilinear",
    "sample_nearest",
    "resize_image",
    "resize_mask",
]


def _check_plane(image: np.ndarray, name: str) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (rows, cols), got ndim={image.ndim}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DimensionError(f"{name} must be non-empty, got shape {image.shape}")
    return image


def sample_bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``image`` at float (row, col) positions with bilinear weights.

    ``rows`` and ``cols`` may have any common shape; the result has that
    shape and dtype float64.  Positions outside the image are clamped to the
    border pixel.
    """
    image = _check_plane(image, "image")
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise DimensionError(
            f"row and col coordinate shapes differ: {rows.shape} vs {cols.shape}"
        )
    h, w = image.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    plane = image.astype(np.float64, copy=False)
    top = plane[r0, c0] * (1.0 - fc) + plane[r0, c1] * fc
    bot = plane[r1, c0] * (1.0 - fc) + plane[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def sample_nearest(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``image`` at float positions, snapping to the nearest pixel.

    Ties at exact .5 round toward the higher index.  The result keeps the
    input dtype, which makes this safe for label images.
    """
    image = _check_plane(image, "image")
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise DimensionError(
            f"row and col coordinate shapes differ: {rows.shape} vs {cols.shape}"
        )
    h, w = image.shape
    r = np.clip(np.floor(rows + 0.5).astype(np.intp), 0, h - 1)
    c = np.clip(np.floor(cols + 0.5).astype(np.intp), 0, w - 1)
    return image[r, c]


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centre source positions for resizing one axis."""
    scale = n_in / n_out
    return (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5


def _resize_grid(out_size: tuple[int, int], in_shape: tuple[int, int]):
    out_h, out_w = out_size
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be positive, got {out_h}x{out_w}")
    rows = _source_coords(out_h, in_shape[0])[:, None]
    cols = _source_coords(out_w, in_shape[1])[None, :]
    return np.broadcast_arrays(rows, cols)


def resize_image(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a grey-value plane to ``out_size`` = (rows, cols)."""
    image = _check_plane(image, "image")
    rows, cols = _resize_grid(out_size, image.shape)
    return sample_bilinear(image, rows, cols)


def resize_mask(mask: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a label plane; never invents new labels."""
    mask = _check_plane(mask, "mask")
    rows, cols = _resize_grid(out_size, mask.shape)
    return sample_nearest(mask, rows, cols)
