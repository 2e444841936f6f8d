"""4-D correlation, coarse-to-fine matching complementation and keypoint transfer.

Dense helpers (:func:`correlate`, :func:`upscale4d`, :func:`complement`)
build full ``(Hs, Ws, Ht, Wt)`` score tensors. Training and inference only
ever need the score rows of a few query cells, so :func:`correlation_rows`
evaluates exactly those rows of the accumulated tensors, pulling in the
coarser-scale rows each bicubic stencil touches.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from mmnet import ops
from mmnet.autodiff import Tensor, make_result

CUBIC_A = -0.5


def cubic_kernel(x: float, a: float = CUBIC_A) -> float:
    x = abs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


@lru_cache(maxsize=None)
def _upsample_matrix(n: int) -> np.ndarray:
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        x = (o + 0.5) / 2.0 - 0.5  # half-pixel aligned source coordinate
        f = int(np.floor(x))
        t = x - f
        for k in (-1, 0, 1, 2):
            m[o, min(max(f + k, 0), n - 1)] += cubic_kernel(t - k)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _taps(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per output sample: the clamped base cell, the 4 clamped tap indices and their weights."""
    o = np.arange(2 * n)
    x = (o + 0.5) / 2.0 - 0.5
    f = np.floor(x).astype(np.intp)
    t = x - f
    k = np.arange(-1, 3)
    idx = np.clip(f[:, None] + k, 0, n - 1)
    w = np.array([[cubic_kernel(tt - kk) for kk in k] for tt in t])
    return np.clip(f, 0, n - 1), idx, w


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) Catmull-Rom interpolation matrix with clamped edges.

    Output sample ``o`` sits at source coordinate ``(o + 0.5) / 2 - 0.5``.
    Rows sum to one, so constants are reproduced.
    """
    if n < 1:
        raise ValueError("upsample_matrix: n must be positive")
    return _upsample_matrix(int(n))


# --------------------------------------------------------------------------
# dense tensors


def correlate(xs: Tensor, xt: Tensor) -> Tensor:
    """``S[i, j, m, n] = <xs[i, j], xt[m, n]>`` for channels-last (H, W, C) maps."""
    if xs.ndim != 3 or xt.ndim != 3:
        raise ValueError("correlate expects (H, W, C) feature maps")
    if xs.shape[-1] != xt.shape[-1]:
        raise ValueError(f"channel mismatch: {xs.shape[-1]} vs {xt.shape[-1]}")
    hs, ws, c = xs.shape
    ht, wt, _ = xt.shape
    a = xs.data.reshape(hs * ws, c)
    b = xt.data.reshape(ht * wt, c)
    # explicit products summed along C: swapping the arguments sums the very same
    # numbers in the same order, so S(xs, xt) and S(xt, xs) are exact transposes
    out = np.empty((hs * ws, ht * wt), dtype=np.result_type(a, b))
    step = max(1, (1 << 21) // max(1, b.size))
    for i in range(0, len(a), step):
        out[i : i + step] = (a[i : i + step, None, :] * b[None, :, :]).sum(axis=-1)

    def bw(g):
        g = g.reshape(hs * ws, ht * wt)
        return (g @ b).reshape(xs.shape), (g.T @ a).reshape(xt.shape)

    return make_result(out.reshape(hs, ws, ht, wt), "correlate", (xs, xt), bw)


def upscale4d(s: Tensor, target_shape=None) -> Tensor:
    """Separable bicubic x2 upscaling along all four axes."""
    if s.ndim != 4:
        raise ValueError(f"upscale4d expects a 4-D tensor, got {s.shape}")
    doubled = tuple(2 * d for d in s.shape)
    if target_shape is not None and tuple(target_shape) != doubled:
        raise ValueError(f"upscale4d only doubles extents: {s.shape} -> {tuple(target_shape)}")
    out = s
    for axis in range(4):
        out = _upsample_axis(out, axis)
    return out


def _upsample_axis(x: Tensor, axis: int) -> Tensor:
    """x2 bicubic along one axis as ``x_base + sum_k w_k (x_k - x_base)``.

    Equal to the matrix form since each row of weights sums to one, but the
    differences vanish on constant data, so constants come back bit-exact.
    """
    n = x.shape[axis]
    base, idx, w = _taps(n)
    shape = [1] * x.ndim
    shape[axis] = 2 * n
    xb = np.take(x.data, base, axis=axis)
    out = xb.copy()
    for k in range(4):
        out += w[:, k].reshape(shape).astype(x.dtype) * (np.take(x.data, idx[:, k], axis=axis) - xb)
    m = upsample_matrix(n).astype(x.dtype)
    return make_result(out, "upsample_axis", (x,),
                       lambda g: (np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis),))


def complement(residual: Tensor, upper: Tensor | None) -> Tensor:
    """Accumulated scores ``residual + upscale4d(upper)``; the coarsest scale passes ``upper=None``."""
    if upper is None:
        return residual
    if tuple(2 * d for d in upper.shape) != residual.shape:
        raise ValueError(f"scale order violation: {upper.shape} does not upscale to {residual.shape}")
    return ops.add(residual, upscale4d(upper))


def accumulate(residuals: dict[int, Tensor], enabled: bool = True) -> dict[int, Tensor]:
    """Apply :func:`complement` top-down over ``{scale: residual}``."""
    out: dict[int, Tensor] = {}
    prev = None
    for s in sorted(residuals, reverse=True):
        out[s] = complement(residuals[s], prev if enabled else None)
        prev = out[s]
    return out


def to_probability(scores: Tensor, query: tuple[int, int], direction: str = "source") -> Tensor:
    """Spatial softmax of one query's slice of a 4-D score tensor.

    ``direction="source"`` takes ``S[i, j, :, :]`` (source cell -> target map),
    ``"target"`` takes ``S[:, :, m, n]``.
    """
    hs, ws, ht, wt = scores.shape
    r, c = query
    if direction == "source":
        if not (0 <= r < hs and 0 <= c < ws):
            raise IndexError(f"source query {query} outside {hs}x{ws}")
        rows = ops.reshape(scores, (hs * ws, ht, wt))
        sl = ops.reshape(ops.index_select(rows, [r * ws + c], 0), (ht, wt))
    elif direction == "target":
        if not (0 <= r < ht and 0 <= c < wt):
            raise IndexError(f"target query {query} outside {ht}x{wt}")
        cols = ops.reshape(scores, (hs, ws, ht * wt))
        sl = ops.reshape(ops.index_select(cols, [r * wt + c], 2), (hs, ws))
    else:
        raise ValueError(f"direction must be 'source' or 'target', got {direction!r}")
    return ops.softmax(sl, axes=(0, 1))


# --------------------------------------------------------------------------
# row-restricted evaluation


def _stencil(cells: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    """Dense weights of each fine cell over the coarse grid: (len(cells), h/2 * w/2)."""
    h, w = extent
    uh, uw = upsample_matrix(h // 2), upsample_matrix(w // 2)
    i, j = np.divmod(cells, w)
    return (uh[i][:, :, None] * uw[j][:, None, :]).reshape(len(cells), -1)


def correlation_rows(
    src: dict[int, Tensor], tgt: dict[int, Tensor], queries: dict[int, np.ndarray], complement_enabled: bool = True
) -> dict[int, Tensor]:
    """Rows of the accumulated score tensors for flat source-cell indices.

    ``src``/``tgt`` map scale -> (H, W, C) features over consecutive scales.
    Returns ``{scale: (len(queries[scale]), Ht * Wt)}`` equal to
    ``accumulate(correlate(...))[scale].reshape(Hs * Ws, -1)[queries[scale]]``.
    """
    scales = sorted(src)
    top = scales[-1]
    need: dict[int, np.ndarray] = {}
    carry = np.zeros(0, dtype=np.intp)
    dense: dict[int, np.ndarray] = {}
    for s in scales:
        q = np.asarray(queries.get(s, ()), dtype=np.intp).reshape(-1)
        hs, ws = src[s].shape[:2]
        if q.size and (q.min() < 0 or q.max() >= hs * ws):
            raise IndexError(f"query cell out of range at scale {s}")
        cells = np.unique(np.concatenate([q, carry]))
        need[s] = cells
        if complement_enabled and s < top and cells.size:
            dense[s] = _stencil(cells, (hs, ws))
            carry = np.flatnonzero(np.any(dense[s] != 0, axis=0))
        else:
            carry = np.zeros(0, dtype=np.intp)

    full: dict[int, Tensor] = {}
    prev = None
    for s in reversed(scales):
        cells = need[s]
        if cells.size == 0:
            prev = None
            continue
        hs, ws, c = src[s].shape
        ht, wt, _ = tgt[s].shape
        sel = ops.index_select(ops.reshape(src[s], (hs * ws, c)), cells, 0)
        rows = ops.matmul(sel, ops.transpose(ops.reshape(tgt[s], (ht * wt, c)), (1, 0)))
        if complement_enabled and s < top and prev is not None:
            up = ops.linear_axis(prev, dense[s][:, need[s + 1]], 0)
            up = ops.reshape(up, (cells.size, ht // 2, wt // 2))
            up = ops.linear_axis(up, upsample_matrix(ht // 2), 1)
            up = ops.linear_axis(up, upsample_matrix(wt // 2), 2)
            rows = ops.add(rows, ops.reshape(up, (cells.size, ht * wt)))
        full[s] = rows
        prev = rows

    out: dict[int, Tensor] = {}
    for s, q in queries.items():
        q = np.asarray(q, dtype=np.intp).reshape(-1)
        if q.size == 0:
            continue
        out[s] = ops.index_select(full[s], np.searchsorted(need[s], q), 0)
    return out


# --------------------------------------------------------------------------
# keypoints


def point_to_cell(points: np.ndarray, stride: int, extent: tuple[int, int]) -> np.ndarray:
    """(K, 2) pixel points (x, y) -> (K, 2) cells (row, col) by ``floor(coord / stride)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = extent
    col = np.clip(np.floor(pts[:, 0] / stride).astype(np.intp), 0, w - 1)
    row = np.clip(np.floor(pts[:, 1] / stride).astype(np.intp), 0, h - 1)
    return np.stack([row, col], axis=1)


def cell_center(cells: np.ndarray, stride: int) -> np.ndarray:
    """(K, 2) cells (row, col) -> (K, 2) pixel points (x, y) at the cell centres."""
    cells = np.asarray(cells).reshape(-1, 2)
    return np.stack([cells[:, 1] * stride + stride / 2.0, cells[:, 0] * stride + stride / 2.0], axis=1)


def transfer_keypoint(prob, stride: int) -> np.ndarray:
    """Centre (x, y) of the arg-max cell of an (Ht, Wt) map; ties go to the lowest row-major index."""
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    if p.ndim != 2:
        raise ValueError(f"expected an (Ht, Wt) map, got {p.shape}")
    m, n = np.unravel_index(int(np.argmax(p)), p.shape)
    return cell_center(np.array([[m, n]]), stride)[0]


def transfer_rows(rows: np.ndarray, extent: tuple[int, int], stride: int) -> np.ndarray:
    """Arg-max transfer for a stack of flattened score rows (K, Ht*Wt) -> (K, 2) points."""
    idx = np.argmax(np.asarray(rows), axis=1)
    m, n = np.divmod(idx, extent[1])
    return cell_center(np.stack([m, n], axis=1), stride)
