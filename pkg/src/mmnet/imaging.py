"""Raster helpers shared by data loading, synthesis and warping.

Images are (H, W, 3) float arrays. Pixel ``(row i, col j)`` is centred at
continuous coordinate ``(x, y) = (j + 0.5, i + 0.5)``; the origin is the
top-left corner of the image.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous points with edge replication outside the image."""
    h, w = image.shape[:2]
    u = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, w - 1.0)
    v = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(u).astype(np.intp), w - 1)
    i0 = np.minimum(np.floor(v).astype(np.intp), h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fu = (u - j0)[..., None] if image.ndim == 3 else u - j0
    fv = (v - i0)[..., None] if image.ndim == 3 else v - i0
    top = image[i0, j0] * (1 - fu) + image[i0, j1] * fu
    bot = image[i1, j0] * (1 - fu) + image[i1, j1] * fu
    return top * (1 - fv) + bot * fv


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (x, y) coordinates of every pixel centre, each (h, w)."""
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return xs, ys


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        s = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    return m


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel aligned bilinear resize to ``size = (H, W)``; exact identity at equal size."""
    h, w = image.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return image.copy()
    rh, rw = _resize_matrix(h, oh), _resize_matrix(w, ow)
    out = np.tensordot(rh, image, axes=([1], [0]))
    out = np.tensordot(rw, out, axes=([1], [1])).swapaxes(0, 1)
    return out.astype(image.dtype)


def scale_points(points: np.ndarray, from_size: tuple[int, int], to_size: tuple[int, int]) -> np.ndarray:
    """Rescale (x, y) points between image sizes given as (H, W)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sx = to_size[1] / from_size[1]
    sy = to_size[0] / from_size[0]
    return pts * np.array([sx, sy])
