"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NumericError, Tensor, watch_kinks


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               n_coords: int = 12, seed: int = 0, floor: float = 1e-6,
               max_redraws: int = 200) -> float:
    """Max relative error between autograd and central differences.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar with a fixed
    random projection. Inputs are promoted to float64. For each tensor, up to
    ``n_coords`` random coordinates are probed. A probe whose ±eps evaluations
    see a different ReLU activation pattern straddles a kink, where the
    derivative is undefined; such coordinates are redrawn.
    """
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.asarray(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    probe = fn(*xs)
    proj = rng.standard_normal(probe.shape)

    def scalar(vals) -> tuple[float, list]:
        with watch_kinks() as masks:
            out = fn(*vals)
        val = float(np.sum(out.data * proj))
        if not np.isfinite(val):
            raise NumericError("non-finite output during gradient check")
        return val, masks

    out = fn(*xs)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite output during gradient check")
    out.backward(proj.astype(out.data.dtype))
    worst = 0.0
    redraws = 0
    for i, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericError("non-finite gradient during gradient check")
        flat = x.data.reshape(-1)
        want = min(n_coords, flat.size)
        tried: set[int] = set()
        done = 0
        while done < want and len(tried) < flat.size:
            j = int(rng.integers(flat.size))
            if j in tried:
                continue
            tried.add(j)
            orig = flat[j]
            flat[j] = orig + eps
            fp, mp = scalar([Tensor(t.data) for t in xs])
            flat[j] = orig - eps
            fm, mm = scalar([Tensor(t.data) for t in xs])
            flat[j] = orig
            if any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                redraws += 1
                if redraws > max_redraws:
                    raise NumericError("too many finite-difference probes hit activation kinks")
                continue
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, _rel_err(float(analytic.reshape(-1)[j]), numeric, floor))
            done += 1
    return worst
