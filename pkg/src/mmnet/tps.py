"""Thin-plate spline fitting and warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmnet.imaging import bilinear_sample, pixel_grid


class TPSError(ValueError):
    pass


def radial_basis(r2: np.ndarray) -> np.ndarray:
    """``U = r^2 log r^2`` evaluated from squared distances, with ``U(0) = 0``."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    return dx * dx + dy * dy


@dataclass(frozen=True)
class TPSWarp:
    control: np.ndarray  # (n, 2) source control points
    target: np.ndarray  # (n, 2) destination control points
    affine: np.ndarray  # (3, 2): rows for 1, x, y
    weights: np.ndarray  # (n, 2) radial weights

    def __call__(self, points) -> np.ndarray:
        return tps_apply(self, points)

    def jacobian(self, points) -> np.ndarray:
        """(K, 2, 2) derivative of the warp; ``J[k, out, in]``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        r2 = _sqdist(pts, self.control)
        g = np.zeros_like(r2)
        nz = r2 > 0
        g[nz] = 2.0 * (np.log(r2[nz]) + 1.0)
        # dU_n/dp = g_n (p - c_n), so J[k, o, i] = sum_n g w[n, o] (p_i - c_n,i)
        gw = g @ self.weights
        jac = np.empty((len(pts), 2, 2))
        for i in range(2):
            jac[:, :, i] = gw * pts[:, i, None] - g @ (self.control[:, i, None] * self.weights)
        return jac + self.affine[1:].T[None]


def tps_fit(src, dst, lam: float = 0.0) -> TPSWarp:
    """Solve the thin-plate spline mapping ``src`` points onto ``dst`` points.

    With ``lam = 0`` the warp interpolates every control point; larger
    ``lam`` trades exactness for smoothness.
    """
    p = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if p.shape != q.shape:
        raise TPSError(f"control point count mismatch: {p.shape} vs {q.shape}")
    if lam < 0:
        raise TPSError("regularisation must be non-negative")
    n = len(p)
    if n < 3:
        raise TPSError("need at least 3 control points")
    if len(np.unique(p, axis=0)) != n:
        raise TPSError("duplicated control points make the system singular")
    ph = np.hstack([np.ones((n, 1)), p])
    if np.linalg.matrix_rank(ph) < 3:
        raise TPSError("control points are collinear; the affine part is undetermined")
    k = radial_basis(_sqdist(p, p)) + lam * np.eye(n)
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = ph
    lhs[n:, :n] = ph.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = q
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise TPSError(f"singular TPS system: {exc}") from None
    if not np.all(np.isfinite(sol)):
        raise TPSError("singular TPS system")
    return TPSWarp(p, q, sol[n:], sol[:n])


def tps_apply(warp: TPSWarp, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape
    pts = pts.reshape(-1, 2)
    u = radial_basis(_sqdist(pts, warp.control))
    out = warp.affine[0] + pts @ warp.affine[1:] + u @ warp.weights
    return out.reshape(shape)


def tps_invert(warp: TPSWarp, points, iters: int = 20, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Newton solve of ``warp(x) = points``; returns (x, converged mask)."""
    y = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = y.copy()
    for _ in range(iters):
        r = tps_apply(warp, x) - y
        jac = warp.jacobian(x)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        safe = np.where(np.abs(det) < 1e-12, 1e-12, det)
        dx = (jac[:, 1, 1] * r[:, 0] - jac[:, 0, 1] * r[:, 1]) / safe
        dy = (-jac[:, 1, 0] * r[:, 0] + jac[:, 0, 0] * r[:, 1]) / safe
        x = x - np.stack([dx, dy], axis=1)
        if np.max(np.abs(r)) < tol:
            break
    err = np.abs(tps_apply(warp, x) - y).max(axis=1)
    return x, err < 1e-6


def warp_image(image: np.ndarray, src_points, dst_points, lam: float = 0.0) -> np.ndarray:
    """Warp ``image`` so that ``src_points`` land on ``dst_points``.

    The spline is fitted in the pull-back direction (destination -> source)
    and every output pixel samples the input bilinearly.
    """
    back = tps_fit(dst_points, src_points, lam)
    h, w = image.shape[:2]
    xs, ys = pixel_grid(h, w)
    sp = tps_apply(back, np.stack([xs.ravel(), ys.ravel()], axis=1))
    out = bilinear_sample(image, sp[:, 0], sp[:, 1])
    return out.reshape(image.shape).astype(image.dtype)
