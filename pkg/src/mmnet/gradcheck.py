"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mmnet import ops
from mmnet.autodiff import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / (||a|| + ||b||)``; zero when both vanish."""
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def projected(fn: Callable[..., Tensor], seed: int = 0) -> Callable[..., Tensor]:
    """Wrap ``fn`` so it returns ``sum(fn(...) * R)`` for a fixed random ``R``."""
    cache: dict = {}

    def wrapped(*args):
        out = fn(*args)
        if "r" not in cache:
            cache["r"] = np.random.default_rng(seed).standard_normal(out.shape)
        return ops.sum(ops.mul(out, Tensor(cache["r"])))

    return wrapped


def _same_masks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_pairs(loss_fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0,
                   skip_kinks: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """(analytic, numeric) gradient entries for each input.

    ``loss_fn(*inputs)`` must return a scalar. With ``max_entries`` only a
    random subset of coordinates per input is differenced. With
    ``skip_kinks`` a coordinate whose +h and -h evaluations switch any ReLU
    is left out, since the central difference there straddles a kink.
    """
    for t in inputs:
        t.grad = None
    loss = loss_fn(*inputs)
    backward(loss)
    rng = np.random.default_rng(seed)
    out = []

    def f() -> tuple[float, list]:
        with no_grad(), ops.trace_relu_masks() as masks:
            return loss_fn(*inputs).item(), masks

    for t in inputs:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.astype(np.float64).reshape(-1)
        flat = t.data.reshape(-1)
        order = np.arange(t.size) if max_entries is None else rng.permutation(t.size)
        want = t.size if max_entries is None else min(max_entries, t.size)
        used, num = [], []
        for i in order:
            if len(used) == want:
                break
            old = flat[i]
            flat[i] = old + h
            fp, mp = f()
            flat[i] = old - h
            fm, mm = f()
            flat[i] = old
            if skip_kinks and not _same_masks(mp, mm):
                continue
            used.append(i)
            num.append((fp - fm) / (2 * h))
        out.append((analytic[np.array(used, dtype=np.intp)], np.array(num)))
    return out


def check_gradients(loss_fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0, skip_kinks: bool = True) -> list[float]:
    """Per-input relative error of :func:`gradient_pairs`."""
    return [relative_error(a, n) for a, n in gradient_pairs(loss_fn, inputs, h, max_entries, seed, skip_kinks)]


def check_joint(loss_fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                max_entries: int | None = None, seed: int = 0, skip_kinks: bool = True) -> float:
    """Relative error over the concatenation of every input's sampled entries.

    Suited to whole networks, where a parameter tensor with a tiny gradient
    would otherwise be judged on rounding noise alone.
    """
    pairs = gradient_pairs(loss_fn, inputs, h, max_entries, seed, skip_kinks)
    return relative_error(np.concatenate([a for a, _ in pairs]), np.concatenate([n for _, n in pairs]))
