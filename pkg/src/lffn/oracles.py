"""Slow reference implementations used to cross-check the fast paths.

Nothing here shares code with :mod:`lffn.ops`; the loops are written out
so that a bug in the vectorised kernels cannot hide in both places.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0, groups=1):
    """Direct grouped cross-correlation in float64 with explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    og = cout // groups
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            grp = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride + u - padding
                                xx = j * stride + v - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[bi, grp * cg + c, yy, xx] * w[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out


def sffm_loops(levels: Sequence[np.ndarray], alphas: Sequence[np.ndarray]):
    """Scalar-loop softmax feature fusion.

    Returns (fused (n, c, h, w), weights (n, m, c)).
    """
    m = len(levels)
    n, c, h, w = levels[0].shape
    out = np.zeros((n, c, h, w))
    weights = np.zeros((n, m, c))
    for bi in range(n):
        pooled = []
        for lvl in levels:
            pooled.append([sum(float(lvl[bi, ch, y, x]) for y in range(h) for x in range(w)) / (h * w)
                           for ch in range(c)])
        y_vals = []
        for i in range(m):
            y_vals.append([sum(float(alphas[i][row, k]) * pooled[i][k] for k in range(c)) for row in range(c)])
        for ch in range(c):
            col = [y_vals[i][ch] for i in range(m)]
            top = max(col)
            ex = [np.exp(v - top) for v in col]
            s = sum(ex)
            for i in range(m):
                weights[bi, i, ch] = ex[i] / s
            for y in range(h):
                for x in range(w):
                    out[bi, ch, y, x] = sum(weights[bi, i, ch] * float(levels[i][bi, ch, y, x]) for i in range(m))
    return out, weights


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-3,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    With ``indices`` only those entries are probed; the rest stay zero.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    it = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in it:
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|n|, tiny), a scale-aware relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    nm = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(nm).max(), np.abs(a).max(), 1e-12)
    return float(np.abs(a - nm).max() / denom)
