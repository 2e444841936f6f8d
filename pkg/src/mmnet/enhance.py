"""Decoder feature pathway: intra-scale fusion, local self-attention, cross-scale fusion."""

from __future__ import annotations

import numpy as np

from mmnet import ops
from mmnet.autodiff import Tensor
from mmnet.config import LSAConfig, ModelConfig, SEMConfig
from mmnet.encoder import LINEAR_GAIN, UNIT_GAIN, FeaturePyramid, _rng, conv_param, he_uniform


def init_parameters(config: ModelConfig, seed=0, dtype=np.float64) -> dict[str, Tensor]:
    """Decoder weights for every scale in ``config.scales``.

    Only parameters that the configured ablation switches actually use are
    created, so every returned tensor receives a gradient.
    """
    rng = _rng(seed)
    c = config.channels
    top = max(config.scales)
    params: dict[str, Tensor] = {}
    for s in config.scales:
        group = config.encoder.groups[s - 1]
        blocks = range(group.blocks) if config.dense_fusion_enabled else [group.blocks - 1]
        for b in blocks:
            for i, _ in enumerate(config.sem.dilations):
                params.update(conv_param(rng, f"dec.s{s}.b{b}.sem{i}", config.sem.branch_channels, group.channels, 3, dtype))
            params.update(conv_param(rng, f"dec.s{s}.b{b}.proj", c, config.sem.branch_channels, 1, dtype,
                                     gain=LINEAR_GAIN))
        if config.lsa_enabled:
            ci = config.lsa.inner_channels
            for name in ("q", "k", "v"):
                params.update(conv_param(rng, f"dec.s{s}.lsa.{name}", ci, c, 1, dtype))
            params.update(conv_param(rng, f"dec.s{s}.lsa.g", c, ci, 1, dtype, gain=LINEAR_GAIN))
        if config.cross_scale_enabled and s < top:
            # (C_in, C_out, 4, 4) transposed-conv kernel, no bias; each output sees 2x2 taps per channel
            params[f"dec.s{s}.up.w"] = Tensor(
                (UNIT_GAIN * he_uniform(rng, (c, c, 4, 4), 4 * c)).astype(dtype), requires_grad=True)
            params.update(conv_param(rng, f"dec.s{s}.fuse", c, 2 * c, 3, dtype, gain=UNIT_GAIN))
    return params


def scale_enhance(x: Tensor, params: dict[str, Tensor], prefix: str, sem: SEMConfig) -> Tensor:
    """Parallel dilated 3x3 conv-ReLU branches, summed."""
    branches = [
        ops.relu(ops.conv2d(x, params[f"{prefix}.sem{i}.w"], params[f"{prefix}.sem{i}.b"], padding=d, dilation=d))
        for i, d in enumerate(sem.dilations)
    ]
    return ops.add_n(branches)


def intra_scale_fuse(blocks, params: dict[str, Tensor], scale: int, sem: SEMConfig, block_ids=None) -> Tensor:
    """Each block output -> its own SEM -> 1x1 conv; the projections are summed."""
    if not blocks:
        raise ValueError("intra_scale_fuse needs at least one block output")
    hw = blocks[0].shape[-3:-1]
    for b in blocks[1:]:
        if b.shape[-3:-1] != hw:
            raise ValueError(f"block outputs disagree on spatial extents: {hw} vs {b.shape[-3:-1]}")
    block_ids = list(range(len(blocks))) if block_ids is None else list(block_ids)
    outs = []
    for b, x in zip(block_ids, blocks):
        prefix = f"dec.s{scale}.b{b}"
        e = scale_enhance(x, params, prefix, sem)
        outs.append(ops.conv2d(e, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"]))
    return outs[0] if len(outs) == 1 else ops.add_n(outs)


def gather_neighborhood(x: Tensor, r: int) -> Tensor:
    """(N, H, W, C) -> (N, H, W, r, r, C): zero-padded r x r window around each cell."""
    return ops.gather_neighborhood(x, r)


def local_self_attention(x: Tensor, params: dict[str, Tensor], prefix: str, config: LSAConfig) -> Tensor:
    """Residual attention of every cell over its r x r neighbourhood.

    ``out_i = x_i + G(V_i softmax(q_i . K_i))`` with ReLU-activated 1x1
    query/key/value maps. Keys and values are computed from the zero-padded
    neighbourhood, so out-of-image slots hold ``relu(bias)`` and take part in
    the softmax.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    n, h, w, c = x.shape
    r = config.r
    s = r * r
    p = lambda name: (params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])  # noqa: E731
    ci = params[f"{prefix}.q.w"].shape[0]
    q = ops.relu(ops.conv2d(x, *p("q")))
    xp = ops.pad2d(x, r // 2)
    keys = ops.reshape(ops.unfold(ops.relu(ops.conv2d(xp, *p("k"))), r), (n, h, w, s, ci))
    vals = ops.reshape(ops.unfold(ops.relu(ops.conv2d(xp, *p("v"))), r), (n, h, w, s, ci))
    logits = ops.matmul(keys, ops.reshape(q, (n, h, w, ci, 1)))
    attn = ops.softmax(logits, axes=3)
    mixed = ops.matmul(ops.reshape(attn, (n, h, w, 1, s)), vals)
    out = ops.add(x, ops.conv2d(ops.reshape(mixed, (n, h, w, ci)), *p("g")))
    return ops.reshape(out, (h, w, c)) if squeeze else out


def attention_weights(x: Tensor, params: dict[str, Tensor], prefix: str, config: LSAConfig) -> np.ndarray:
    """Softmax weights (N, H, W, r*r) used by :func:`local_self_attention` (diagnostic)."""
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    n, h, w, _ = x.shape
    r, ci = config.r, params[f"{prefix}.q.w"].shape[0]
    q = ops.relu(ops.conv2d(x, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]))
    k = ops.relu(ops.conv2d(ops.pad2d(x, r // 2), params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]))
    keys = ops.reshape(ops.unfold(k, r), (n, h, w, r * r, ci))
    logits = ops.matmul(keys, ops.reshape(q, (n, h, w, ci, 1)))
    return ops.softmax(logits, axes=3).data[..., 0]


def cross_scale_fuse(upper: Tensor, intra: Tensor, params: dict[str, Tensor], scale: int) -> Tensor:
    """Deconv-upsample the coarser map, concatenate with ``intra``, 3x3 conv back to C channels."""
    uh, uw = upper.shape[-3:-1]
    h, w = intra.shape[-3:-1]
    if (2 * uh, 2 * uw) != (h, w):
        raise ValueError(f"upper extents {uh}x{uw} are not half of {h}x{w}")
    up = ops.deconv2d(upper, params[f"dec.s{scale}.up.w"], None, stride=2, padding=1)
    cat = ops.concat_channels([up, intra])
    return ops.conv2d(cat, params[f"dec.s{scale}.fuse.w"], params[f"dec.s{scale}.fuse.b"], padding=1)


def enhance_pyramid(pyramid: FeaturePyramid, params: dict[str, Tensor], config: ModelConfig) -> dict[int, Tensor]:
    """Top-down enhancement from the coarsest configured scale to the finest.

    Returns ``{scale: (N, H_l, W_l, C)}``.
    """
    out: dict[int, Tensor] = {}
    prev = None
    for s in sorted(config.scales, reverse=True):
        blocks = pyramid[s]
        if config.dense_fusion_enabled:
            x = intra_scale_fuse(blocks, params, s, config.sem)
        else:
            x = intra_scale_fuse(blocks[-1:], params, s, config.sem, block_ids=[len(blocks) - 1])
        if config.lsa_enabled:
            x = local_self_attention(x, params, f"dec.s{s}.lsa", config.lsa)
        if config.cross_scale_enabled and prev is not None:
            x = cross_scale_fuse(prev, x, params, s)
        out[s] = x
        prev = x
    return out
