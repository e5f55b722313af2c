"""Bilinear resampling expressed as small dense interpolation matrices.

Sampling uses pixel centres (``src = start + (i + 0.5) * length / n_out - 0.5``),
so resizing to the same extent is exactly the identity.
"""

import numpy as np


def interp_matrix(n_in: int, n_out: int, start: float = 0.0, length: float = None) -> np.ndarray:
    """(n_out, n_in) matrix sampling the window ``[start, start + length)`` of a 1-D signal."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"extents must be >= 1, got {n_in} -> {n_out}")
    length = float(n_in) if length is None else float(length)
    src = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array."""
    ry = interp_matrix(image.shape[1], height)
    rx = interp_matrix(image.shape[2], width)
    return np.einsum("yh,chw,xw->cyx", ry, image, rx).astype(image.dtype, copy=False)


def crop_resize(image: np.ndarray, top: float, left: float, crop_h: float, crop_w: float,
                height: int, width: int) -> np.ndarray:
    """Resample the box (top, left, crop_h, crop_w) of a (C, H, W) array to height x width."""
    ry = interp_matrix(image.shape[1], height, top, crop_h)
    rx = interp_matrix(image.shape[2], width, left, crop_w)
    return np.einsum("yh,chw,xw->cyx", ry, image, rx).astype(image.dtype, copy=False)


def grid_interp_matrix(src_hw, dst_hw) -> np.ndarray:
    """Matrix mapping a flattened (h*w) grid to another grid size, row-major."""
    if tuple(src_hw) == tuple(dst_hw):
        return np.eye(src_hw[0] * src_hw[1])
    ry = interp_matrix(src_hw[0], dst_hw[0])
    rx = interp_matrix(src_hw[1], dst_hw[1])
    return np.kron(ry, rx)
