"""Bilinear resampling primitives shared by preprocessing and augmentation.

One sampler is used everywhere so that golden files pin a single
interpolation convention: pixel (r, c) is centered at coordinate (r, c),
resizing uses half-pixel-centered source coordinates, and out-of-range
samples are either a constant fill or edge-free ('101') reflection.
"""

from __future__ import annotations

import numpy as np


def reflect_coords(coords: np.ndarray, n: int) -> np.ndarray:
    """Fold continuous coordinates into [0, n-1] by reflection without
    repeating the border sample (numpy 'reflect' convention)."""
    if n == 1:
        return np.zeros_like(coords)
    period = 2.0 * (n - 1)
    folded = np.abs(coords) % period
    return np.where(folded > n - 1, period - folded, folded)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                    mode: str = "constant", cval: float = 0.0) -> np.ndarray:
    """Sample `img` at real-valued (ys, xs) with bilinear interpolation.

    mode='constant' treats everything outside the image as `cval`;
    mode='reflect' folds coordinates back into the image first.
    Returns float64 with the shape of `ys`.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)

    if mode == "reflect":
        ys = reflect_coords(ys, h)
        xs = reflect_coords(xs, w)
    elif mode != "constant":
        raise ValueError(f"unknown sampling mode: {mode!r}")

    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1

    out = np.zeros(ys.shape, dtype=np.float64)
    for yi, xi, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += wgt * np.where(valid, vals, cval)
    return out


def rotated_crop(img: np.ndarray, center_xy: tuple[float, float],
                 angle_rad: float, side: int,
                 mode: str = "constant", cval: float = 0.0) -> np.ndarray:
    """Extract a `side`x`side` crop centered on `center_xy`, with the image
    content rotated by -angle_rad about that center.

    A line through `center_xy` at slope angle `angle_rad` (atan2 of dy/dx,
    y pointing down) comes out horizontal. Rotation and crop are fused into
    a single bilinear pass.
    """
    cx, cy = center_xy
    half = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side) - half, np.arange(side) - half,
                         indexing="ij")
    cos_a = np.cos(angle_rad)
    sin_a = np.sin(angle_rad)
    # inverse map: output offsets are rotated by +angle into source space
    src_x = cos_a * cc - sin_a * rr + cx
    src_y = sin_a * cc + cos_a * rr + cy
    return bilinear_sample(img, src_y, src_x, mode=mode, cval=cval)


def rotate_image(img: np.ndarray, angle_rad: float,
                 mode: str = "reflect", cval: float = 0.0) -> np.ndarray:
    """Rotate content by `angle_rad` (positive turns the +x axis toward +y,
    i.e. clockwise on screen) about the image center, keeping the shape."""
    h, w = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos_a = np.cos(-angle_rad)
    sin_a = np.sin(-angle_rad)
    src_x = cos_a * cc - sin_a * rr + cx
    src_y = sin_a * cc + cos_a * rr + cy
    return bilinear_sample(img, src_y, src_x, mode=mode, cval=cval)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with half-pixel-centered bilinear sampling (edges clamped)."""
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(img, yy, xx, mode="constant")
