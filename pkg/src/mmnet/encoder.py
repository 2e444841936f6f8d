"""Five-group convolutional backbone trained from scratch.

Each group halves the resolution with a strided 3x3 conv-ReLU (its first
block) and then applies ``blocks - 1`` residual conv-ReLU blocks. Every
block output is kept so the decoder can fuse all of them.
"""

from __future__ import annotations

import numpy as np

from mmnet import ops
from mmnet.autodiff import Tensor
from mmnet.config import EncoderConfig

FeaturePyramid = dict  # scale -> list of (N, H_l, W_l, C_l) block outputs


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    """Uniform on [-sqrt(6 / fan_in), sqrt(6 / fan_in)]."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# Nothing in the network normalises activations. Residual branches start
# damped by RESIDUAL_GAIN; the 1x1 layers that create each decoder map
# (projections and the attention output G) by LINEAR_GAIN, so raw
# dot-product scores start at O(1) instead of saturating the softmax.
# Linear layers that no ReLU follows and that only pass maps on (the
# cross-scale deconvolution and fusion) use UNIT_GAIN, which keeps the
# activation scale, so every scale starts with features of similar size.
RESIDUAL_GAIN = 0.5
LINEAR_GAIN = 0.05
UNIT_GAIN = float(np.sqrt(0.5))


def conv_param(rng, name: str, cout: int, cin: int, k: int, dtype, bias: bool = True,
               gain: float = 1.0) -> dict[str, Tensor]:
    w = he_uniform(rng, (cout, cin, k, k), cin * k * k, np.float64) * gain
    out = {f"{name}.w": Tensor(w.astype(dtype), requires_grad=True)}
    if bias:
        out[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return out


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_parameters(config: EncoderConfig, seed=0, dtype=np.float64) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights and zero biases, reproducible from ``seed``."""
    rng = _rng(seed)
    params: dict[str, Tensor] = {}
    cin = 3
    for g, spec in enumerate(config.groups, start=1):
        for b in range(spec.blocks):
            params.update(conv_param(rng, f"enc.g{g}.b{b}", spec.channels, cin if b == 0 else spec.channels, 3, dtype,
                                     gain=1.0 if b == 0 else RESIDUAL_GAIN))
        cin = spec.channels
    return params


def check_input_size(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ValueError(f"input extents must be divisible by 32, got {h}x{w}")


def encode(images: Tensor, params: dict[str, Tensor], config: EncoderConfig, keep_group1: bool = False) -> FeaturePyramid:
    """Run the backbone on (N, H, W, 3) images.

    Returns ``{scale: [block outputs]}`` for scales 2..5; the first group is
    computed but only returned when ``keep_group1`` is set.
    """
    if images.ndim == 3:
        images = ops.reshape(images, (1,) + images.shape)
    n, h, w, c = images.shape
    if c != 3:
        raise ValueError(f"expected 3-channel images, got {c}")
    check_input_size(h, w)
    pyramid: FeaturePyramid = {}
    x = images
    for g, spec in enumerate(config.groups, start=1):
        outs = []
        for b in range(spec.blocks):
            wt, bs = params[f"enc.g{g}.b{b}.w"], params[f"enc.g{g}.b{b}.b"]
            if b == 0:
                x = ops.relu(ops.conv2d(x, wt, bs, stride=spec.stride, padding=1))
            else:
                x = ops.add(x, ops.relu(ops.conv2d(x, wt, bs, stride=1, padding=1)))
            outs.append(x)
        if g >= 2 or keep_group1:
            pyramid[g] = outs
    return pyramid
