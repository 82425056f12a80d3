"""Seeded k-means shared by PQ training and shard planning.

Deterministic by construction: k-means++ style initialization from a pinned
PCG64 stream and a fixed iteration count (no convergence test), so the same
(sample, k, iters, seed) always yields the same centroids.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError


def kmeans(sample: np.ndarray, k: int, iters: int, seed: int) -> np.ndarray:
    """Run k-means and return (k, dim) float32 centroids.

    iters=0 returns the seeded initialization unchanged. Empty clusters keep
    their previous centroid. Requires len(sample) >= k.
    """
    x = np.ascontiguousarray(sample, dtype=np.float32)
    n = x.shape[0]
    if n < k:
        raise InvalidArgumentError(f"k-means needs >= {k} samples, got {n}")
    centroids = _init_plusplus(x, k, seed)
    for _ in range(iters):
        assign = _nearest(x, centroids)
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0, dtype=np.float64).astype(np.float32)
    return centroids


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row; ties break to the lowest index."""
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; the ||x||^2 term is rank-neutral
    dots = x @ centroids.T
    c_norms = np.einsum("ij,ij->i", centroids, centroids)
    return np.argmin(c_norms[None, :] - 2.0 * dots, axis=1)


def _init_plusplus(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(0, n))
    centroids[0] = x[first]
    d = x - centroids[0]
    min_sq = np.einsum("ij,ij->i", d, d).astype(np.float64)
    for c in range(1, k):
        total = float(min_sq.sum())
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            centroids[c:] = centroids[c - 1]
            break
        target = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(min_sq), target))
        idx = min(idx, n - 1)
        centroids[c] = x[idx]
        d = x - centroids[c]
        sq = np.einsum("ij,ij->i", d, d)
        np.minimum(min_sq, sq, out=min_sq)
    return centroids
