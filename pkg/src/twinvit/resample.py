"""Linear resampling operators shared by image resizing and positional
embedding interpolation."""
from __future__ import annotations

import functools

import numpy as np


@functools.lru_cache(maxsize=256)
def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix for 1-D linear interpolation, half-pixel centers.

    Equal sizes give the identity exactly; each row sums to 1.
    """
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    w.setflags(write=False)
    return w


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (C, H, W) array with separable bilinear interpolation."""
    _, h, w = img.shape
    rows = bilinear_weights(h, out_h)
    cols = bilinear_weights(w, out_w)
    out = np.einsum("oh,chw,pw->cop", rows, img.astype(np.float64), cols, optimize=True)
    return out.astype(img.dtype)


def grid_interpolation(grid_in: int, grid_out: int) -> np.ndarray:
    """(grid_out², grid_in²) matrix resampling a raster-ordered square grid."""
    one_d = bilinear_weights(grid_in, grid_out)
    return np.kron(one_d, one_d)
