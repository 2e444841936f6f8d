"""The assembled matching network: backbone + enhancement + row-wise matching."""

from __future__ import annotations

import numpy as np

from mmnet import encoder, enhance, ops
from mmnet.autodiff import Tensor, no_grad
from mmnet.config import ModelConfig
from mmnet.matching import correlation_rows, point_to_cell, transfer_rows


class MMNet:
    """Parameters plus the forward pass.

    ``params`` maps names to leaf tensors; images are (N, H, W, 3) in [0, 1].
    """

    def __init__(self, config: ModelConfig | None = None, params: dict[str, Tensor] | None = None, seed=0,
                 dtype=np.float32):
        self.config = config or ModelConfig()
        if params is None:
            rng = np.random.default_rng(seed)
            params = encoder.init_parameters(self.config.encoder, rng, dtype)
            params.update(enhance.init_parameters(self.config, rng, dtype))
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def features(self, images) -> dict[int, Tensor]:
        """Enhanced (N, H_l, W_l, C) maps for every configured scale."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        pyramid = encoder.encode(images, self.params, self.config.encoder)
        return enhance.enhance_pyramid(pyramid, self.params, self.config)

    def extent(self, scale: int) -> tuple[int, int]:
        return self.config.extent(scale)

    def query_cells(self, points: np.ndarray, scale: int) -> np.ndarray:
        """Flat cell indices of pixel points (x, y) at ``scale``."""
        h, w = self.extent(scale)
        cells = point_to_cell(points, 2**scale, (h, w))
        return cells[:, 0] * w + cells[:, 1]

    def rows(self, fs: dict[int, Tensor], ft: dict[int, Tensor], points: np.ndarray, scales) -> dict[int, Tensor]:
        """Accumulated score rows of source points against the whole target map."""
        queries = {s: self.query_cells(points, s) for s in scales}
        return correlation_rows(fs, ft, queries, self.config.complement_enabled)

    def predict(self, src_image, tgt_image, src_points: np.ndarray, scales=None) -> dict[int, np.ndarray]:
        """Transfer source keypoints to the target image at each requested scale."""
        scales = tuple(self.config.scales if scales is None else scales)
        with no_grad():
            feats = self.features(np.stack([src_image, tgt_image]))
            fs = {s: Tensor(f.data[0]) for s, f in feats.items()}
            ft = {s: Tensor(f.data[1]) for s, f in feats.items()}
            rows = self.rows(fs, ft, src_points, scales)
        return {s: transfer_rows(rows[s].data, self.extent(s), 2**s) for s in scales}

    def select(self, feats: dict[int, Tensor], index: int) -> dict[int, Tensor]:
        """One image's (H, W, C) maps out of a batched feature dict."""
        out = {}
        for s, f in feats.items():
            out[s] = ops.reshape(ops.index_select(f, [index], 0), f.shape[1:])
        return out
