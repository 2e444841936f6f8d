"""Ground-truth probability maps, the multi-scale matching loss and SGD training."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mmnet import ops
from mmnet.autodiff import Tensor, backward
from mmnet.config import SCALES, TrainConfig
from mmnet.data import Sample, in_bounds
from mmnet.matching import correlation_rows, point_to_cell

log = logging.getLogger(__name__)

GAUSS_SIGMA = 1.0


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# ground truth


def gaussian_kernel1d(sigma: float = GAUSS_SIGMA) -> np.ndarray:
    g = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
    return g / g.sum()


def _smoothing_matrix(n: int, sigma: float) -> np.ndarray:
    # tridiagonal 3-tap filter with zero padding
    g = gaussian_kernel1d(sigma)
    return g[1] * np.eye(n) + g[0] * np.eye(n, k=-1) + g[2] * np.eye(n, k=1)


def bilinear_cells(u: np.ndarray, v: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    """Distance-weighted mass on the four integer cells around feature coords (u, v).

    Returns (K, H, W) maps; coordinates are clamped to the cell lattice.
    """
    h, w = extent
    u = np.clip(np.asarray(u, dtype=np.float64).reshape(-1), 0.0, w - 1.0)
    v = np.clip(np.asarray(v, dtype=np.float64).reshape(-1), 0.0, h - 1.0)
    j0 = np.minimum(np.floor(u).astype(np.intp), max(w - 2, 0))
    i0 = np.minimum(np.floor(v).astype(np.intp), max(h - 2, 0))
    fu, fv = u - j0, v - i0
    j1, i1 = np.minimum(j0 + 1, w - 1), np.minimum(i0 + 1, h - 1)
    k = np.arange(len(u))
    out = np.zeros((len(u), h, w))
    np.add.at(out, (k, i0, j0), (1 - fu) * (1 - fv))
    np.add.at(out, (k, i0, j1), fu * (1 - fv))
    np.add.at(out, (k, i1, j0), (1 - fu) * fv)
    np.add.at(out, (k, i1, j1), fu * fv)
    return out


def smooth_and_normalize(maps: np.ndarray, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    """3x3 Gaussian (zero padded) followed by renormalisation to unit mass."""
    _, h, w = maps.shape
    out = _smoothing_matrix(h, sigma) @ maps @ _smoothing_matrix(w, sigma).T
    return out / out.sum(axis=(1, 2), keepdims=True)


def feature_coords(points: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel (x, y) -> continuous cell coordinates; cell centres land on integers."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts[:, 0] / stride - 0.5, pts[:, 1] / stride - 0.5


def build_gt_map(points, stride: int, extent: tuple[int, int], image_size=None, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    """(K, H, W) target distributions for keypoints given in the opposite image's pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    size = image_size or (extent[0] * stride, extent[1] * stride)
    bad = ~in_bounds(pts, size)
    if bad.any():
        raise ValueError(f"keypoint {pts[bad][0].tolist()} outside the {size[0]}x{size[1]} image")
    u, v = feature_coords(pts, stride)
    return smooth_and_normalize(bilinear_cells(u, v, extent), sigma)


def filter_annotations(src_kps, tgt_kps, src_size, tgt_size) -> tuple[np.ndarray, np.ndarray, int]:
    """Keep the pairs whose points lie inside both images; returns (src, tgt, dropped)."""
    s = np.asarray(src_kps, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(tgt_kps, dtype=np.float64).reshape(-1, 2)
    keep = in_bounds(s, src_size) & in_bounds(t, tgt_size)
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropped %d of %d keypoints outside the images", dropped, len(s))
    return s[keep], t[keep], dropped


# --------------------------------------------------------------------------
# loss


def _direction_loss(fq: dict, fr: dict, q_pts: np.ndarray, r_pts: np.ndarray, scales, model_cfg, complement) -> dict:
    """Per-scale mean BCE of query points against maps over the reference image."""
    queries = {}
    for s in scales:
        ext = fq[s].shape[:2]
        cells = point_to_cell(q_pts, 2**s, ext)
        queries[s] = cells[:, 0] * ext[1] + cells[:, 1]
    rows = correlation_rows(fq, fr, queries, complement)
    out = {}
    for s in scales:
        ext = fr[s].shape[:2]
        target = build_gt_map(r_pts, 2**s, ext, model_cfg.encoder.input_size).reshape(len(r_pts), -1)
        out[s] = ops.softmax_bce(rows[s], target)
    return out


def pair_loss(fs: dict, ft: dict, src_kps, tgt_kps, scales, model_cfg) -> dict[int, Tensor]:
    """``{scale: mean over keypoints of BCE(src -> tgt) + BCE(tgt -> src)}`` for one pair."""
    if len(src_kps) == 0:
        raise ValueError("empty annotations")
    comp = model_cfg.complement_enabled
    fwd = _direction_loss(fs, ft, src_kps, tgt_kps, scales, model_cfg, comp)
    bwd = _direction_loss(ft, fs, tgt_kps, src_kps, scales, model_cfg, comp)
    k = len(src_kps)
    return {s: ops.scalar_mul(ops.sum(ops.add(fwd[s], bwd[s])), 1.0 / k) for s in scales}


def batch_loss(model, batch: list[Sample], config: TrainConfig) -> tuple[Tensor, dict[int, float]]:
    """Weighted multi-scale loss averaged over the batch, plus unweighted per-scale values."""
    if not batch:
        raise ValueError("empty batch")
    scales = tuple(sorted(config.supervised_scales))
    missing = [s for s in scales if s not in model.config.scales]
    if missing:
        raise ValueError(f"supervised scales {missing} are not produced by the model")
    images = np.stack([im for smp in batch for im in (smp.source, smp.target)]).astype(model.dtype)
    feats = model.features(images)
    per_scale: dict[int, list[Tensor]] = {s: [] for s in scales}
    for b, smp in enumerate(batch):
        fs = model.select(feats, 2 * b)
        ft = model.select(feats, 2 * b + 1)
        src, tgt, _ = filter_annotations(smp.src_kps, smp.tgt_kps, smp.source.shape[:2], smp.target.shape[:2])
        for s, v in pair_loss(fs, ft, src, tgt, scales, model.config).items():
            per_scale[s].append(v)
    means = {s: ops.scalar_mul(ops.add_n(v), 1.0 / len(batch)) for s, v in per_scale.items()}
    total = ops.add_n([ops.scalar_mul(means[s], config.alpha(s)) for s in scales])
    return total, {s: means[s].item() for s in scales}


# --------------------------------------------------------------------------
# optimisation


class SGD:
    """``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            v = self.velocity[k]
            v *= self.momentum
            v += g
            v += self.weight_decay * p.data
            p.data -= np.asarray(lr, dtype=p.data.dtype) * v


@dataclass
class StepResult:
    iteration: int
    lr: float
    loss: float
    per_scale: dict[int, float]


def train_step(model, batch: list[Sample], opt: SGD, config: TrainConfig, iteration: int = 0) -> StepResult:
    """Forward, loss, backward and one SGD update. A non-finite loss raises before any update."""
    opt.zero_grad()
    total, per_scale = batch_loss(model, batch, config)
    value = total.item()
    if not np.isfinite(value):
        detail = ", ".join(f"scale {s}: {v!r}" for s, v in per_scale.items())
        ids = ", ".join(smp.pair_id for smp in batch)
        raise TrainingError(f"non-finite loss {value!r} at iteration {iteration} ({detail}); pairs: {ids}")
    backward(total)
    lr = config.lr_at(iteration)
    opt.step(lr)
    return StepResult(iteration, lr, value, per_scale)


LOG_HEADER = ["iter", "lr", "loss"] + [f"loss_scale{s}" for s in SCALES]


def _log_row(r: StepResult) -> list[str]:
    return [str(r.iteration), repr(r.lr), repr(r.loss)] + [repr(r.per_scale[s]) if s in r.per_scale else "" for s in SCALES]


def batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches; reshuffled each epoch from ``seed``."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i : i + batch_size]


def train(model, dataset: list[Sample], config: TrainConfig, out_dir=None, config_text: str | None = None,
          callback=None) -> list[StepResult]:
    """Run ``config.max_iters`` SGD steps.

    When ``out_dir`` is given the per-iteration CSV log goes to
    ``out_dir/train_log.csv`` and checkpoints to ``out_dir/ckpt_<iter>``
    every ``checkpoint_interval`` iterations plus ``out_dir/final``.
    """
    from mmnet.mmt import save_checkpoint

    if not dataset:
        raise ValueError("empty training set")
    opt = SGD(model.params, config.momentum, config.weight_decay)
    stream = batches(len(dataset), config.batch_size, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    history: list[StepResult] = []
    t0 = time.perf_counter()
    try:
        for it in range(config.max_iters):
            batch = [dataset[i] for i in next(stream)]
            r = train_step(model, batch, opt, config, it)
            history.append(r)
            if writer is not None:
                writer.writerow(_log_row(r))
            if callback is not None:
                callback(r)
            if out is not None and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
                fh.flush()
                save_checkpoint(out / f"ckpt_{it + 1:06d}", model.params, config_text)
            if (it + 1) % 100 == 0:
                log.info("iter %d loss %.4f (%.1f ms/iter)", it + 1, r.loss, 1e3 * (time.perf_counter() - t0) / (it + 1))
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "final", model.params, config_text)
    return history
