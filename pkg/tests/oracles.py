"""Independent reference implementations used as test oracles.

Nothing here imports the package's own numerics: quantiles, pinball loss,
CRPS, Jacobians and gradients are recomputed from first principles.
"""

from __future__ import annotations

import math

import numpy as np

GRID = [k / 20 for k in range(1, 20)]


def type7_quantile(values, q: float) -> float:
    """Hand-rolled linear-interpolation quantile: h = (N-1) q."""
    xs = sorted(float(v) for v in values)
    h = (len(xs) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def pinball(pred: float, y: float, q: float) -> float:
    diff = y - pred
    return q * diff if diff >= 0 else (q - 1.0) * diff


def brute_force_crps(samples, actuals, grid=GRID) -> np.ndarray:
    """Per (step, series) CRPS by explicit loops over every cell and grid level."""
    samples = np.asarray(samples, dtype=float)
    S, H, n = samples.shape
    out = np.zeros((H, n))
    for t in range(H):
        for i in range(n):
            col = samples[:, t, i]
            total = 0.0
            for q in grid:
                total += 2.0 * pinball(type7_quantile(col, q), float(actuals[t][i]), q)
            out[t, i] = total / len(grid)
    return out


def gaussian_crps(sigma: float = 1.0, mu: float = 0.0, y: float = 0.0) -> float:
    """Closed form for a normal forecast."""
    z = (y - mu) / sigma
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf = 0.5 * (1 + math.erf(z / math.sqrt(2)))
    return sigma * (z * (2 * cdf - 1) + 2 * pdf - 1 / math.sqrt(math.pi))


def numeric_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = eps
        cols.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def grad_mismatch(analytic, numeric, rel: float = 1e-3, floor: float = 1e-6):
    """Indices where |a - n| exceeds max(rel * max(|a|, |n|), floor)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    tol = np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), floor)
    return np.argwhere(np.abs(a - n) > tol)


def finite_difference(loss_fn, params, eps: float = 1e-4):
    """Central differences of a scalar ``loss_fn()`` w.r.t. every entry of each array in ``params``.

    ``params`` are objects with a mutable ``.data`` array.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = loss_fn()
            p.data[idx] = orig - eps
            down = loss_fn()
            p.data[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def level_order_S(edges) -> tuple[list[str], np.ndarray]:
    """Aggregation matrix of a balanced tree built from scratch (BFS order, leaves last)."""
    children: dict[str, list[str]] = {}
    kids = set()
    for p, c in edges:
        children.setdefault(p, []).append(c)
        kids.add(c)
    root = next(p for p, _ in edges if p not in kids)
    order, queue = [], [root]
    while queue:
        v = queue.pop(0)
        order.append(v)
        queue.extend(children.get(v, []))
    upper = [v for v in order if v in children]
    leaves = [v for v in order if v not in children]
    nodes = upper + leaves

    def below(v):
        if v not in children:
            return {v}
        return set().union(*(below(c) for c in children[v]))

    S = np.array([[1 if leaf in below(v) else 0 for leaf in leaves] for v in nodes])
    return nodes, S
