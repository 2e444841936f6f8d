"""PCK metrics, per-category aggregation, PCK-alpha curves and scale selection."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmnet.data import CANVAS, Sample

PRED_HEADER = ["pair_id", "kp_index", "src_x", "src_y", "pred_x", "pred_y", "gt_x", "gt_y"]


@dataclass
class PCKResult:
    alpha: float
    normalizer: str
    per_category: dict[str, tuple[int, int]] = field(default_factory=dict)  # name -> (correct, total)

    @property
    def correct(self) -> int:
        return sum(c for c, _ in self.per_category.values())

    @property
    def total(self) -> int:
        return sum(t for _, t in self.per_category.values())

    @property
    def value(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def category(self, name: str) -> float:
        c, t = self.per_category[name]
        return c / t

    def to_dict(self) -> dict:
        cats = {k: {"pck": c / t, "correct": c, "total": t} for k, (c, t) in sorted(self.per_category.items())}
        return {"alpha": self.alpha, "normalizer": self.normalizer, "per_category": cats, "all": self.value,
                "correct": self.correct, "total": self.total}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def table(self) -> str:
        """Plain-text table: one column per category plus ``all``."""
        names = sorted(self.per_category)
        head = " ".join(f"{n:>8}" for n in names + ["all"])
        vals = " ".join(f"{100 * self.category(n):8.1f}" for n in names) + f" {100 * self.value:8.1f}"
        return f"PCK@{self.alpha:g} ({self.normalizer})\n{head}\n{vals}"


def longer_side(normalizer: str, size=None, bbox=None) -> float:
    if normalizer == "image":
        h, w = size if size is not None else CANVAS
        return float(max(h, w))
    if normalizer == "bbox":
        if bbox is None:
            raise ValueError("bbox normalizer needs a bounding box for every pair")
        x0, y0, x1, y1 = np.asarray(bbox, dtype=np.float64).reshape(4)
        return float(max(x1 - x0, y1 - y0))
    raise ValueError(f"normalizer must be 'image' or 'bbox', got {normalizer!r}")


def pck(predictions, gts, alpha: float, normalizer: str = "image", sizes=None, bboxes=None,
        categories=None) -> PCKResult:
    """Fraction of points with ``||pred - gt|| <= alpha * d`` (boundary inclusive).

    ``predictions`` and ``gts`` are per-pair (K_i, 2) arrays; ``d`` is the
    longer side of each pair's image (``sizes``, default 224 x 320) or of its
    bounding box (``bboxes``).
    """
    if len(predictions) == 0:
        raise ValueError("pck: empty input")
    if len(predictions) != len(gts):
        raise ValueError(f"pck: {len(predictions)} prediction sets vs {len(gts)} ground-truth sets")
    n = len(predictions)
    cats = list(categories) if categories is not None else ["all"] * n
    counts: dict[str, list[int]] = {}
    for i in range(n):
        p = np.asarray(predictions[i], dtype=np.float64).reshape(-1, 2)
        g = np.asarray(gts[i], dtype=np.float64).reshape(-1, 2)
        if p.shape != g.shape:
            raise ValueError(f"pck: pair {i} has {len(p)} predictions for {len(g)} ground-truth points")
        d = longer_side(normalizer, None if sizes is None else sizes[i], None if bboxes is None else bboxes[i])
        if not d > 0:
            raise ValueError(f"pck: non-positive normaliser d={d} for pair {i}")
        dist = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
        c = counts.setdefault(cats[i], [0, 0])
        c[0] += int(np.count_nonzero(dist <= alpha * d))
        c[1] += len(p)
    if sum(t for _, t in counts.values()) == 0:
        raise ValueError("pck: no keypoints")
    return PCKResult(alpha, normalizer, {k: (v[0], v[1]) for k, v in counts.items()})


def pck_curve(predictions, gts, alphas, **kwargs) -> list[tuple[float, float]]:
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("pck_curve: no alphas")
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError(f"pck_curve: alphas must be sorted ascending, got {alphas}")
    return [(a, pck(predictions, gts, a, **kwargs).value) for a in alphas]


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "pck"])
        for a, v in curve:
            w.writerow([f"{a:g}", repr(v)])


# --------------------------------------------------------------------------
# predictions


@dataclass
class Matches:
    """Keypoint transfers for a set of pairs, aligned with the sample order."""

    pair_ids: list[str]
    categories: list[str]
    src: list[np.ndarray]
    pred: list[np.ndarray]
    gt: list[np.ndarray]
    bboxes: list = field(default_factory=list)

    def pck(self, alpha: float, normalizer: str = "image") -> PCKResult:
        return pck(self.pred, self.gt, alpha, normalizer, bboxes=self.bboxes or None, categories=self.categories)


def predict_all(model, samples: list[Sample], scales=None, log_timing=None) -> dict[int, Matches]:
    """Transfer every source keypoint at every requested scale."""
    scales = tuple(model.config.scales if scales is None else scales)
    out = {s: Matches([], [], [], [], [], []) for s in scales}
    t0 = time.perf_counter()
    for smp in samples:
        preds = model.predict(smp.source, smp.target, smp.src_kps, scales)
        for s in scales:
            m = out[s]
            m.pair_ids.append(smp.pair_id)
            m.categories.append(smp.category)
            m.src.append(np.asarray(smp.src_kps))
            m.pred.append(preds[s])
            m.gt.append(np.asarray(smp.tgt_kps))
            m.bboxes.append(smp.tgt_bbox)
    if log_timing is not None and samples:
        log_timing(f"{1e3 * (time.perf_counter() - t0) / len(samples):.1f} ms per pair")
    if any(b is None for m in out.values() for b in m.bboxes):
        for m in out.values():
            m.bboxes = []
    return out


def select_scale(matches: dict[int, Matches], alpha: float = 0.1, normalizer: str = "image") -> int:
    """Scale with the best validation PCK; ties go to the finer scale."""
    best = None
    for s in sorted(matches):
        v = matches[s].pck(alpha, normalizer).value
        if best is None or v > best[1]:
            best = (s, v)
    return best[0]


def write_predictions(path, m: Matches) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for pid, src, pred, gt in zip(m.pair_ids, m.src, m.pred, m.gt):
            for k in range(len(src)):
                w.writerow([pid, k] + [f"{v:.6f}" for v in (src[k, 0], src[k, 1], pred[k, 0], pred[k, 1], gt[k, 0], gt[k, 1])])


def read_predictions(path, categories: dict[str, str] | None = None) -> Matches:
    """Parse a predictions CSV; pairs keep their first-appearance order."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PRED_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for r in reader:
            rows.setdefault(r["pair_id"], []).append(r)
    m = Matches([], [], [], [], [], [])
    for pid, rs in rows.items():
        rs.sort(key=lambda r: int(r["kp_index"]))
        arr = np.array([[float(r[c]) for c in PRED_HEADER[2:]] for r in rs])
        m.pair_ids.append(pid)
        m.categories.append((categories or {}).get(pid, "all"))
        m.src.append(arr[:, 0:2])
        m.pred.append(arr[:, 2:4])
        m.gt.append(arr[:, 4:6])
    return m


def write_json(path, result: PCKResult, extra: dict | None = None) -> None:
    d = result.to_dict()
    d.update(extra or {})
    Path(path).write_text(json.dumps(d, indent=2) + "\n")
