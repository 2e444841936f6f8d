"""Fast built-in oracle and gradient checks run by ``mmnet selftest``."""

from __future__ import annotations

import itertools
import time

import numpy as np

from mmnet import enhance, matching, ops
from mmnet.autodiff import Tensor
from mmnet.config import LSAConfig
from mmnet.evaluation import pck
from mmnet.gradcheck import check_gradients, projected
from mmnet.mmt import decode_mmt, encode_mmt
from mmnet.supervision import build_gt_map
from mmnet.tps import tps_apply, tps_fit


def _t(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def check_conv_grads(rng) -> float:
    errs = []
    for stride, pad, dil in ((1, 1, 1), (2, 1, 1), (1, 2, 2)):
        x, w, b = _t(rng, 2, 6, 5, 3), _t(rng, 4, 3, 3, 3), _t(rng, 4)
        f = projected(lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=pad, dilation=dil))
        errs += check_gradients(f, [x, w, b])
    x, w = _t(rng, 1, 3, 4, 3), _t(rng, 3, 2, 4, 4)
    errs += check_gradients(projected(lambda x, w: ops.deconv2d(x, w)), [x, w])
    return max(errs)


def check_lsa_grads(rng) -> float:
    cfg = LSAConfig(r=3, inner_channels=2)
    params = {f"lsa.{n}.{k}": _t(rng, *s) for n, (co, ci) in {"q": (2, 4), "k": (2, 4), "v": (2, 4), "g": (4, 2)}.items()
              for k, s in (("w", (co, ci, 1, 1)), ("b", (co,)))}
    x = _t(rng, 1, 3, 4, 4)
    names = sorted(params)

    def f(x, *ps):
        return enhance.local_self_attention(x, dict(zip(names, ps)), "lsa", cfg)

    return max(check_gradients(projected(f), [x] + [params[n] for n in names]))


def check_bce_grads(rng) -> float:
    s = _t(rng, 3, 7)
    t = rng.random((3, 7))
    t /= t.sum(axis=1, keepdims=True)
    return max(check_gradients(lambda s: ops.sum(ops.softmax_bce(s, t)), [s]))


def check_correlation(rng) -> float:
    xs, xt = rng.standard_normal((3, 4, 5)), rng.standard_normal((2, 3, 5))
    s = matching.correlate(Tensor(xs), Tensor(xt)).data
    ref = np.zeros(s.shape)
    for i, j, m, n in itertools.product(*(range(d) for d in s.shape)):
        ref[i, j, m, n] = sum(xs[i, j, c] * xt[m, n, c] for c in range(5))
    return float(np.abs(s - ref).max())


def check_upscale_constant(rng) -> float:
    c = rng.standard_normal()
    up = matching.upscale4d(Tensor(np.full((2, 3, 2, 3), c))).data
    return float(np.abs(up - c).max())


def check_lsa_identity(rng) -> float:
    cfg = LSAConfig(r=5, inner_channels=3)
    x = Tensor(rng.standard_normal((1, 4, 5, 6)))
    params = {}
    for n, (co, ci) in {"q": (3, 6), "k": (3, 6), "v": (3, 6), "g": (6, 3)}.items():
        params[f"a.{n}.w"] = Tensor(np.zeros((co, ci, 1, 1)) if n == "g" else rng.standard_normal((co, ci, 1, 1)))
        params[f"a.{n}.b"] = Tensor(np.zeros(co) if n == "g" else rng.standard_normal(co))
    out = enhance.local_self_attention(x, params, "a", cfg).data
    return float(np.abs(out - x.data).max())


def check_gt_mass(rng) -> float:
    pts = np.stack([rng.uniform(0, 320, 20), rng.uniform(0, 224, 20)], axis=1)
    maps = build_gt_map(pts, 8, (28, 40))
    return float(np.abs(maps.sum(axis=(1, 2)) - 1).max())


def check_pck_boundary(rng) -> float:
    r = pck([np.array([[10.0, 0.0], [6.0, 8.01]])], [np.zeros((2, 2))], 0.1, sizes=[(100, 100)])
    return abs(r.value - 0.5)


def check_tps(rng) -> float:
    src = rng.uniform(0, 100, (8, 2))
    dst = src + rng.normal(0, 5, src.shape)
    interp = np.abs(tps_apply(tps_fit(src, dst), src) - dst).max()
    a = np.array([[1.1, 0.2], [-0.1, 0.9]])
    aff = tps_fit(src, src @ a.T + [3.0, -2.0])
    return float(max(interp, np.abs(aff.weights).max()))


def check_mmt(rng) -> float:
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    return float(np.abs(decode_mmt(encode_mmt(a)) - a).max())


CHECKS = [
    ("conv/deconv gradients", check_conv_grads, 1e-4),
    ("local self-attention gradients", check_lsa_grads, 1e-4),
    ("softmax-BCE gradients", check_bce_grads, 1e-4),
    ("correlation vs loop oracle", check_correlation, 1e-10),
    ("bicubic upscaling keeps constants", check_upscale_constant, 0.0),
    ("attention residual identity", check_lsa_identity, 0.0),
    ("ground-truth maps have unit mass", check_gt_mass, 1e-6),
    ("PCK inclusive boundary", check_pck_boundary, 0.0),
    ("TPS interpolation and affine weights", check_tps, 1e-8),
    ("MMT1 round trip", check_mmt, 0.0),
]


def run(seed: int = 0, out=print) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        try:
            err = fn(rng)
            passed = err <= tol
            detail = f"err={err:.3g} tol={tol:g}"
        except Exception as exc:  # report and keep going
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail}, {1e3 * (time.perf_counter() - t0):.0f} ms)")
    return ok
