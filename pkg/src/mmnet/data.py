"""Images, keypoint annotations, dataset manifests and synthetic pairs.

A dataset manifest is a directory with ``annotations.csv`` and an
``images/`` folder of binary PPM files. Keypoints are (x, y) pixel
coordinates, x to the right and y down from the top-left corner. Once a
pair is loaded everything lives in the canonical 224 x 320 frame.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmnet.imaging import bilinear_sample, pixel_grid, resize_bilinear, scale_points
from mmnet.tps import TPSError, tps_apply, tps_fit, tps_invert

log = logging.getLogger(__name__)

CANVAS = (224, 320)
HEADER = ["pair_id", "category", "src_image", "tgt_image", "src_kps", "tgt_kps", "src_bbox", "tgt_bbox"]


class PPMError(ValueError):
    pass


# --------------------------------------------------------------------------
# PPM


def _ppm_header(buf: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset) of a P6 file."""
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < 4:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise PPMError("truncated PPM header")
        tokens.append(buf[start:i])
    if tokens[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError("malformed PPM header") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise PPMError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    if i >= n or not buf[i : i + 1].isspace():
        raise PPMError("truncated PPM header")
    return w, h, maxval, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """P6 bytes -> (H, W, 3) float64 values scaled to [0, 1]."""
    w, h, maxval, off = _ppm_header(buf)
    need = w * h * 3
    if len(buf) - off < need:
        raise PPMError(f"truncated PPM payload: {len(buf) - off} of {need} bytes")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def image_size(path) -> tuple[int, int]:
    """(H, W) from the PPM header without decoding the payload."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    w, h, _, _ = _ppm_header(head)
    return h, w


def resize_to_canvas(image: np.ndarray, points=None, size=CANVAS):
    """Bilinear resize to ``size``; optional points are rescaled by the same factors."""
    out = resize_bilinear(image, size)
    if points is None:
        return out
    return out, scale_points(points, image.shape[:2], size)


# --------------------------------------------------------------------------
# annotations


@dataclass
class KeypointAnnotation:
    pair_id: str
    category: str
    src_image: str
    tgt_image: str
    src_kps: np.ndarray  # (K, 2) x, y
    tgt_kps: np.ndarray
    src_size: tuple[int, int] | None = None  # (H, W) before resizing
    tgt_size: tuple[int, int] | None = None
    src_bbox: np.ndarray | None = None  # x0, y0, x1, y1
    tgt_bbox: np.ndarray | None = None


@dataclass
class Sample:
    """An image pair in the canonical frame together with its matched keypoints."""

    pair_id: str
    category: str
    source: np.ndarray  # (H, W, 3)
    target: np.ndarray
    src_kps: np.ndarray  # (K, 2)
    tgt_kps: np.ndarray
    src_bbox: np.ndarray | None = None
    tgt_bbox: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def format_points(points) -> str:
    return ";".join(f"{x:.6f}:{y:.6f}" for x, y in np.asarray(points).reshape(-1, 2))


def parse_points(text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.zeros((0, 2))
    pts = []
    for item in text.split(";"):
        x, y = item.split(":")
        pts.append((float(x), float(y)))
    return np.array(pts, dtype=np.float64)


def format_bbox(b) -> str:
    return "" if b is None else ":".join(f"{v:.6f}" for v in np.asarray(b).reshape(4))


def parse_bbox(text: str | None):
    if text is None or not text.strip():
        return None
    vals = [float(v) for v in text.split(":")]
    if len(vals) != 4:
        raise ValueError(f"bbox needs 4 values x0:y0:x1:y1, got {text!r}")
    return np.array(vals)


def in_bounds(points: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Mask of (x, y) points inside an image of size (H, W)."""
    pts = np.asarray(points).reshape(-1, 2)
    h, w = size
    return (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)


def parse_annotations(path, image_root=None) -> list[KeypointAnnotation]:
    """Read ``annotations.csv``; malformed or out-of-bounds rows are skipped with a warning.

    Image sizes are read from the PPM headers under ``image_root`` (default:
    the CSV's directory) when the files exist.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    out: list[KeypointAnnotation] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in HEADER[:6] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for row in reader:
            pid = row["pair_id"]
            try:
                src = parse_points(row["src_kps"])
                tgt = parse_points(row["tgt_kps"])
                sb = parse_bbox(row.get("src_bbox"))
                tb = parse_bbox(row.get("tgt_bbox"))
            except ValueError as exc:
                log.warning("pair %s: unparseable row skipped (%s)", pid, exc)
                continue
            if len(src) != len(tgt):
                log.warning("pair %s: %d source vs %d target keypoints, row rejected", pid, len(src), len(tgt))
                continue
            if len(src) == 0:
                log.warning("pair %s: no keypoints, row rejected", pid)
                continue
            sizes = []
            for name in ("src_image", "tgt_image"):
                p = root / row[name]
                sizes.append(image_size(p) if p.is_file() else None)
            bad = False
            for pts, size, side in ((src, sizes[0], "source"), (tgt, sizes[1], "target")):
                if size is not None and not in_bounds(pts, size).all():
                    log.warning("pair %s: %s keypoint outside %dx%d image, row skipped", pid, side, *size)
                    bad = True
            if bad:
                continue
            out.append(
                KeypointAnnotation(pid, row["category"], row["src_image"], row["tgt_image"], src, tgt,
                                   sizes[0], sizes[1], sb, tb)
            )
    return out


def write_annotations(path, annotations) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HEADER)
        for a in annotations:
            wr.writerow([a.pair_id, a.category, a.src_image, a.tgt_image, format_points(a.src_kps),
                         format_points(a.tgt_kps), format_bbox(a.src_bbox), format_bbox(a.tgt_bbox)])


def load_pair(ann: KeypointAnnotation, root, size=CANVAS) -> Sample:
    root = Path(root)
    src = load_image(root / ann.src_image)
    tgt = load_image(root / ann.tgt_image)
    src_r, src_k = resize_to_canvas(src, ann.src_kps, size)
    tgt_r, tgt_k = resize_to_canvas(tgt, ann.tgt_kps, size)

    def box(b, shape):
        if b is None:
            return None
        return scale_points(np.asarray(b).reshape(2, 2), shape[:2], size).reshape(4)

    return Sample(ann.pair_id, ann.category, src_r.astype(np.float32), tgt_r.astype(np.float32), src_k, tgt_k,
                  box(ann.src_bbox, src.shape), box(ann.tgt_bbox, tgt.shape))


def load_dataset(manifest_dir, size=CANVAS) -> list[Sample]:
    d = Path(manifest_dir)
    csv_path = d / "annotations.csv"
    if not csv_path.is_file():
        raise FileNotFoundError(f"no annotations.csv in {d}")
    return [load_pair(a, d, size) for a in parse_annotations(csv_path, d)]


def write_dataset(manifest_dir, samples) -> Path:
    d = Path(manifest_dir)
    (d / "images").mkdir(parents=True, exist_ok=True)
    anns = []
    for s in samples:
        src_name, tgt_name = f"images/{s.pair_id}_src.ppm", f"images/{s.pair_id}_tgt.ppm"
        save_image(d / src_name, s.source)
        save_image(d / tgt_name, s.target)
        anns.append(KeypointAnnotation(s.pair_id, s.category, src_name, tgt_name, s.src_kps, s.tgt_kps,
                                       s.source.shape[:2], s.target.shape[:2], s.src_bbox, s.tgt_bbox))
    write_annotations(d / "annotations.csv", anns)
    return d


# --------------------------------------------------------------------------
# synthetic pairs


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    warp: str = "tps"  # "tps" | "affine" | "identity" | "translation"
    magnitude: float = 1.0
    keypoints: int = 10
    pairs: int = 10
    size: tuple[int, int] = CANVAS
    translation: tuple[float, float] = (10.0, 4.0)  # used by warp="translation"
    margin: float = 12.0

    def __post_init__(self):
        if self.warp not in ("tps", "affine", "identity", "translation"):
            raise ValueError(f"unknown warp family {self.warp!r}")


CATEGORIES = ("blobs", "grid", "mixed")


def synth_texture(rng: np.random.Generator, size, category: str) -> tuple[np.ndarray, np.ndarray]:
    """Random Gaussian blobs over a smooth background, plus grid lines.

    Returns the image and the blob centres (candidate keypoints).
    """
    h, w = size
    xs, ys = pixel_grid(h, w)
    c0, c1 = rng.uniform(0.2, 0.8, size=(2, 3))
    t = (xs / w)[..., None]
    img = c0 * (1 - t) + c1 * t
    n_blobs = {"blobs": 60, "grid": 25, "mixed": 40}[category]
    centres = np.stack([rng.uniform(0, w, n_blobs), rng.uniform(0, h, n_blobs)], axis=1)
    sig = rng.uniform(3.0, 9.0, n_blobs)
    cols = rng.uniform(-0.7, 0.7, size=(n_blobs, 3))
    for (cx, cy), s, col in zip(centres, sig, cols):
        r = int(np.ceil(3 * s))
        i0, i1 = max(int(cy) - r, 0), min(int(cy) + r + 1, h)
        j0, j1 = max(int(cx) - r, 0), min(int(cx) + r + 1, w)
        g = np.exp(-((xs[i0:i1, j0:j1] - cx) ** 2 + (ys[i0:i1, j0:j1] - cy) ** 2) / (2 * s * s))
        img[i0:i1, j0:j1] += g[..., None] * col
    if category in ("grid", "mixed"):
        spacing = rng.uniform(24, 48)
        phase = rng.uniform(0, spacing, 2)
        col = rng.uniform(-0.4, 0.4, 3)
        line = (np.abs(((xs - phase[0]) % spacing) - spacing / 2) > spacing / 2 - 1.5) | (
            np.abs(((ys - phase[1]) % spacing) - spacing / 2) > spacing / 2 - 1.5
        )
        img = img + line[..., None] * col
    return np.clip(img, 0.0, 1.0), centres


def _random_affine(rng, spec: SyntheticSpec) -> np.ndarray:
    h, w = spec.size
    m = spec.magnitude
    theta = rng.uniform(-0.2, 0.2) * m
    s = 1.0 + rng.uniform(-0.1, 0.1) * m
    shear = rng.uniform(-0.05, 0.05) * m
    a = s * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) @ np.array([[1, shear], [0, 1]])
    c = np.array([w / 2, h / 2])
    t = c - a @ c + rng.uniform(-40, 40, 2) * m
    return np.hstack([a, t[:, None]])


class Warp:
    """Forward map source -> target with an inverse for pull-back sampling."""

    def __init__(self, kind: str, matrix=None, tps=None):
        self.kind = kind
        self.matrix = matrix
        self.tps = tps

    def forward(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if self.kind == "affine":
            return pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        return tps_apply(self.tps, pts)

    def inverse(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if self.kind == "affine":
            a, t = self.matrix[:, :2], self.matrix[:, 2]
            return np.linalg.solve(a, (pts - t).T).T, np.ones(len(pts), bool)
        return tps_invert(self.tps, pts)

    def jacobian_det(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "affine":
            return np.full(len(pts), np.linalg.det(self.matrix[:, :2]))
        j = self.tps.jacobian(pts)
        return j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]


def make_warp(rng, spec: SyntheticSpec) -> Warp:
    if spec.warp == "identity":
        return Warp("affine", np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    if spec.warp == "translation":
        tx, ty = spec.translation
        return Warp("affine", np.array([[1.0, 0, tx], [0, 1.0, ty]]))
    if spec.warp == "affine":
        return Warp("affine", _random_affine(rng, spec))
    h, w = spec.size
    gy, gx = np.meshgrid(np.linspace(0, h, 4), np.linspace(0, w, 5), indexing="ij")
    ctrl = np.stack([gx.ravel(), gy.ravel()], axis=1)
    aff = _random_affine(rng, spec)
    dst = ctrl @ aff[:, :2].T + aff[:, 2] + rng.normal(0, 8.0 * spec.magnitude, ctrl.shape)
    return Warp("tps", tps=tps_fit(ctrl, dst))


def _bbox(points: np.ndarray, size, pad: float = 10.0) -> np.ndarray:
    h, w = size
    lo = np.maximum(points.min(axis=0) - pad, 0)
    hi = np.minimum(points.max(axis=0) + pad, [w, h])
    return np.array([lo[0], lo[1], hi[0], hi[1]])


def synth_pair(spec: SyntheticSpec, index: int, max_tries: int = 20) -> Sample:
    """One deterministic synthetic pair; warps that fail the invertibility check are redrawn."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.size
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    img, centres = synth_texture(rng, spec.size, category)
    img = np.round(img * 255.0) / 255.0
    m = spec.margin
    for _ in range(max_tries):
        warp = make_warp(rng, spec)
        fwd = warp.forward(centres)
        ok = (
            (centres[:, 0] > m) & (centres[:, 0] < w - m) & (centres[:, 1] > m) & (centres[:, 1] < h - m)
            & (fwd[:, 0] > m) & (fwd[:, 0] < w - m) & (fwd[:, 1] > m) & (fwd[:, 1] < h - m)
            & (warp.jacobian_det(centres) > 0.2)
        )
        back, conv = warp.inverse(fwd)
        ok &= conv & (np.abs(back - centres).max(axis=1) < 1e-6)
        idx = np.flatnonzero(ok)
        if len(idx) >= spec.keypoints:
            break
    else:
        raise RuntimeError(f"could not place {spec.keypoints} valid keypoints for pair {index}")
    pick = rng.choice(idx, size=spec.keypoints, replace=False)
    src_kps = centres[pick]
    tgt_kps = warp.forward(src_kps)
    xs, ys = pixel_grid(h, w)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if warp.kind == "affine" and np.allclose(warp.matrix, [[1, 0, 0], [0, 1, 0]]):
        tgt = img.copy()
    else:
        back, _ = warp.inverse(grid)
        tgt = bilinear_sample(img, back[:, 0], back[:, 1]).reshape(img.shape)
        tgt = np.round(tgt * 255.0) / 255.0
    return Sample(
        f"syn{spec.seed}_{index:05d}", category, img.astype(np.float32), tgt.astype(np.float32), src_kps, tgt_kps,
        _bbox(src_kps, spec.size), _bbox(tgt_kps, spec.size), meta={"warp": warp},
    )


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    """``spec.pairs`` synthetic pairs with exact ground-truth correspondences."""
    return [synth_pair(spec, i) for i in range(spec.pairs)]


__all__ = [
    "CANVAS", "KeypointAnnotation", "PPMError", "Sample", "SyntheticSpec", "TPSError", "decode_ppm", "encode_ppm",
    "generate_synthetic", "image_size", "in_bounds", "load_dataset", "load_image", "parse_annotations",
    "resize_to_canvas", "save_image", "write_annotations", "write_dataset",
]
