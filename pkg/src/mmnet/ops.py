"""Differentiable operations with hand-written adjoints.

Feature maps are channels-last: batched ``(N, H, W, C)``, and ``conv2d`` /
``deconv2d`` also accept a single ``(H, W, C)`` map. There is no implicit
broadcasting: operands must agree in shape except where a bias is added
along the channel axis.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from mmnet.autodiff import Tensor, make_result


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    _check_same(a, b, "add")
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise ValueError("add_n: empty input")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "add_n")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return make_result(out, "add_n", tensors, lambda g: tuple(g for _ in tensors))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    x = _t(x)
    c = float(c)
    return make_result(x.data * c, "scalar_mul", (x,), lambda g: (g * c,))


_relu_masks: list | None = None


@contextmanager
def trace_relu_masks():
    """Collect the activation mask of every ReLU evaluated inside the block."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(x: Tensor) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    return make_result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., c] + b[c]`` for a channels-last ``x``."""
    x, b = _t(x), _t(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_channel_bias: bias {b.shape} does not fit {x.shape}")
    red = tuple(range(x.ndim - 1))
    return make_result(x.data + b.data, "add_channel_bias", (x, b), lambda g: (g, g.sum(axis=red)))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    shape = x.shape
    return make_result(
        np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), lambda g: (np.full(shape, g, dtype=x.dtype),)
    )


def sum_axis(x: Tensor, axis: int) -> Tensor:
    x = _t(x)
    axis = axis % x.ndim
    return make_result(
        x.data.sum(axis=axis),
        "sum_axis",
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _t(x)
    old = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _t(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[d] != tensors[0].shape[d] for d in range(nd) if d != axis):
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, "concat", tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate channels-last maps along the channel axis."""
    return concat(tensors, axis=-1)


def index_select(x: Tensor, index, axis: int) -> Tensor:
    """``np.take`` along ``axis``; repeated indices accumulate in the adjoint."""
    x = _t(x)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_result(np.take(x.data, index, axis=axis), "index_select", (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_result(np.matmul(ad, bd), "matmul", (a, b), bw)


def linear_axis(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant ``(n_out, n_in)`` matrix along one axis of ``x``."""
    x = _t(x)
    m = np.asarray(matrix, dtype=x.dtype)
    axis = axis % x.ndim
    if m.ndim != 2 or m.shape[1] != x.shape[axis]:
        raise ValueError(f"linear_axis: matrix {m.shape} does not fit axis {axis} of {x.shape}")

    def apply(mat, arr):
        return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)

    return make_result(apply(m, x.data), "linear_axis", (x,), lambda g: (apply(m.T, g),))


# --------------------------------------------------------------------------
# softmax family


def _axes(x: Tensor, axes) -> tuple:
    if axes is None:
        raise ValueError("softmax: at least one reduction axis is required")
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    if not axes:
        raise ValueError("softmax: at least one reduction axis is required")
    return tuple(sorted(a % x.ndim for a in axes))


def softmax(x: Tensor, axes) -> Tensor:
    """Max-shifted softmax normalising over ``axes`` jointly."""
    x = _t(x)
    axes = _axes(x, axes)
    z = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return make_result(y, "softmax", (x,), bw)


def _log_softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=-1, keepdims=True)
    return s - (m + np.log(np.exp(s - m).sum(axis=-1, keepdims=True)))


def _log1mexp(logp: np.ndarray) -> np.ndarray:
    # log(1 - exp(logp)) for logp <= 0, accurate on both sides of -ln 2
    with np.errstate(divide="ignore"):
        out = np.where(
            logp > -np.log(2.0),
            np.log(-np.expm1(np.minimum(logp, 0.0))),
            np.log1p(-np.exp(logp)),
        )
    return np.maximum(out, np.log(np.finfo(np.float64).tiny))


def _log_complement_rows(s: np.ndarray, logp: np.ndarray) -> np.ndarray:
    """``log(1 - softmax(s))`` per entry.

    Off the arg-max ``p <= 1/2`` and :func:`_log1mexp` is exact enough. At the
    arg-max of a saturated row ``logp`` is pure rounding error, so that entry
    is taken as the log-sum-exp of the other cells instead.
    """
    out = _log1mexp(logp)
    k = s.argmax(axis=-1)[..., None]
    m = np.take_along_axis(s, k, axis=-1)
    e = np.exp(s - m)
    np.put_along_axis(e, k, 0.0, axis=-1)
    with np.errstate(divide="ignore"):
        rest = np.log(e.sum(axis=-1, keepdims=True)) - np.log1p(e.sum(axis=-1, keepdims=True))
    rest = np.maximum(rest, np.log(np.finfo(np.float64).tiny))
    np.put_along_axis(out, k, rest, axis=-1)
    return out


def softmax_bce(scores: Tensor, target) -> Tensor:
    """Binary cross-entropy between ``softmax(scores)`` and ``target`` along the last axis.

    Returns one value per row: ``-sum_k t_k log p_k + (1 - t_k) log(1 - p_k)``.
    Evaluated in float64 from log-probabilities so saturated rows stay finite.
    """
    scores = _t(scores)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != scores.shape:
        raise ValueError(f"softmax_bce: target {t.shape} vs scores {scores.shape}")
    s = scores.data.astype(np.float64)
    logp = _log_softmax_rows(s)
    log1mp = _log_complement_rows(s, logp)
    loss = -(t * logp + (1.0 - t) * log1mp).sum(axis=-1)
    p = np.exp(logp)

    def bw(g):
        a = -t + (1.0 - t) * np.exp(logp - log1mp)
        gs = a - p * a.sum(axis=-1, keepdims=True)
        return ((gs * np.asarray(g, dtype=np.float64)[..., None]).astype(scores.dtype),)

    return make_result(loss.astype(scores.dtype), "softmax_bce", (scores,), bw)


# --------------------------------------------------------------------------
# convolution (channels-last feature maps)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (H,W,C) or (N,H,W,C), got {x.shape}")
    return x, False


def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
        writeable=False,
    )
    return view.reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = padded_shape[0], padded_shape[3]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, k, k, c)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            out[:, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[
                :, :, :, i, j
            ]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.ascontiguousarray(x[:, p:-p, p:-p])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """Cross-correlation of an (N, H, W, C_in) map with a (C_out, C_in, k, k) kernel.

    Output extent per axis is ``(n + 2*padding - dilation*(k-1) - 1) // stride + 1``.
    """
    x, weight = _t(x), _t(weight)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    xb, squeeze = _as_batch(x)
    n, h, w, c = xb.shape
    if weight.ndim != 4 or weight.shape[1] != c or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight {weight.shape} incompatible with input channels {c}")
    cout, _, k, _ = weight.shape
    ho = _out_extent(h, k, stride, padding, dilation)
    wo = _out_extent(w, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent ({ho}, {wo})")
    xd, wd = xb.data, weight.data
    wm = wd.transpose(2, 3, 1, 0).reshape(k * k * c, cout)
    pointwise = k == 1 and stride == 1 and padding == 0
    cols = xd.reshape(n * h * w, c) if pointwise else _im2col(_pad(xd, padding), k, stride, dilation, ho, wo)
    out = cols @ wm
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
        out += bias.data
    padded_shape = (n, h + 2 * padding, w + 2 * padding, c)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if xb.requires_grad:
            if pointwise:
                gx = (g2 @ wm.T).reshape(xd.shape)
            elif stride == 1 and padding <= dilation * (k - 1):
                # stride-1 adjoint is a correlation of g with the flipped kernel
                q = dilation * (k - 1) - padding
                wf = wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * cout, c)
                gx = (_im2col(_pad(g, q), k, 1, dilation, h, w) @ wf).reshape(xd.shape)
            else:
                gcols = g2 @ wm.T
                gx = _crop(_col2im(gcols, padded_shape, k, stride, dilation, ho, wo), padding)
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(k, k, c, cout).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (xb, weight) if bias is None else (xb, weight, bias)
    res = make_result(out.reshape(n, ho, wo, cout), "conv2d", inputs, bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution of an (N, H, W, C_in) map; ``weight`` is (C_in, C_out, k, k).

    This is the adjoint of :func:`conv2d` with the same kernel, stride and
    padding. Output extent is ``(H - 1) * stride - 2 * padding + k``, so a
    4x4 kernel with stride 2 and padding 1 doubles the spatial size.
    """
    x, weight = _t(x), _t(weight)
    if stride < 1 or padding < 0:
        raise ValueError("deconv2d: stride must be >= 1, padding >= 0")
    xb, squeeze = _as_batch(x)
    n, h, w, cin = xb.shape
    if weight.ndim != 4 or weight.shape[0] != cin or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"deconv2d: weight {weight.shape} incompatible with input channels {cin}")
    _, cout, k, _ = weight.shape
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise ValueError(f"deconv2d: non-positive output extent ({ho}, {wo})")
    xd, wd = xb.data, weight.data
    wm = wd.transpose(0, 2, 3, 1).reshape(cin, k * k * cout)
    x2 = xd.reshape(n * h * w, cin)
    padded_shape = (n, ho + 2 * padding, wo + 2 * padding, cout)
    out = _crop(_col2im(x2 @ wm, padded_shape, k, stride, 1, h, w), padding)
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (cout,):
            raise ValueError(f"deconv2d: bias {bias.shape} does not match {cout} output channels")
        out += bias.data

    def bw(g):
        gcols = _im2col(_pad(np.ascontiguousarray(g), padding), k, stride, 1, h, w)
        gx = (gcols @ wm.T).reshape(xd.shape) if xb.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((x2.T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 1, 2)) if bias.requires_grad else None)

    inputs = (xb, weight) if bias is None else (xb, weight, bias)
    res = make_result(out, "deconv2d", inputs, bw)
    return reshape(res, res.shape[1:]) if squeeze else res


# --------------------------------------------------------------------------
# neighbourhoods


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two spatial axes of an (N, H, W, C) map by ``p`` on each side."""
    x = _t(x)
    if x.ndim != 4:
        raise ValueError(f"pad2d expects (N,H,W,C), got {x.shape}")
    if p == 0:
        return x
    return make_result(_pad(x.data, p), "pad2d", (x,), lambda g: (_crop(g, p),))


def unfold(xp: Tensor, r: int) -> Tensor:
    """All valid r x r windows of a pre-padded (N, H + r - 1, W + r - 1, C) map.

    Returns (N, H, W, r, r, C) with ``out[:, i, j, a, b] = xp[:, i + a, j + b]``.
    """
    xp = _t(xp)
    if r < 1:
        raise ValueError("unfold: r must be positive")
    n, hp, wp, c = xp.shape
    h, w = hp - r + 1, wp - r + 1
    if h <= 0 or w <= 0:
        raise ValueError(f"unfold: window {r} larger than input {xp.shape}")
    sn, sh, sw, sc = xp.data.strides
    view = as_strided(xp.data, shape=(n, h, w, r, r, c), strides=(sn, sh, sw, sh, sw, sc), writeable=False)

    def bw(g):
        gx = np.zeros((n, hp, wp, c), dtype=g.dtype)
        for a in range(r):
            for b in range(r):
                gx[:, a : a + h, b : b + w] += g[:, :, :, a, b]
        return (gx,)

    return make_result(view.copy(), "unfold", (xp,), bw)


def gather_neighborhood(x: Tensor, r: int) -> Tensor:
    """r x r zero-padded window centred on every cell: (N,H,W,C) -> (N,H,W,r,r,C)."""
    if r < 1 or r % 2 == 0:
        raise ValueError(f"neighbourhood size must be odd and positive, got {r}")
    x = _t(x)
    squeeze = x.ndim == 3
    xb = reshape(x, (1,) + x.shape) if squeeze else x
    out = unfold(pad2d(xb, r // 2), r)
    return reshape(out, out.shape[1:]) if squeeze else out
