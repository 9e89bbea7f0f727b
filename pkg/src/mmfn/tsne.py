"""Exact (O(n^2)) t-SNE for small embedding dumps."""

from __future__ import annotations

import numpy as np

MAX_POINTS = 2000


def _sq_dists(x: np.ndarray) -> np.ndarray:
    s = np.sum(x * x, axis=1)
    d = s[:, None] + s[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_p(dist: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity)."""
    n = dist.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-(d - d.min()) * beta)
            total = w.sum()
            row = w / total
            entropy = -np.sum(row * np.log(np.maximum(row, 1e-300)))
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = row
    return p


def tsne(
    x,
    perplexity: float = 30.0,
    n_iter: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> np.ndarray:
    """Embed rows of ``x`` in 2-D. Perplexity is capped at (n - 1) / 3 for tiny inputs."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n > MAX_POINTS:
        raise ValueError(f"{n} points exceeds the exact t-SNE cap of {MAX_POINTS}; subsample first")
    rng = np.random.default_rng(seed)
    if n < 2:
        return np.zeros((n, 2))
    perplexity = max(1.0, min(perplexity, (n - 1) / 3.0))
    p = _conditional_p(_sq_dists(x), perplexity)
    p = np.maximum((p + p.T) / (2.0 * n), 1e-12)

    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iter):
        exaggerate = early_exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        pq = (exaggerate * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
    return y


def kl_divergence(x, y, perplexity: float = 30.0) -> float:
    """KL(P || Q) of an embedding ``y`` of ``x``; lower is a more faithful layout."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    perplexity = max(1.0, min(perplexity, (n - 1) / 3.0))
    p = _conditional_p(_sq_dists(x), perplexity)
    p = np.maximum((p + p.T) / (2.0 * n), 1e-12)
    num = 1.0 / (1.0 + _sq_dists(np.asarray(y)))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    mask = ~np.eye(n, dtype=bool)
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
