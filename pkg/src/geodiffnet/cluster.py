"""Lloyd's k-means with k-means++ seeding, used to visualize decoder feature maps."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError


def kmeans_plusplus(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(X)), labels].sum()


def lloyd(X, k, rng, max_iter=100):
    """Return ``(labels, centers, objective_trace)``.

    ``objective_trace[i]`` is the within-cluster sum of squares after the i-th
    assignment step. An emptied cluster keeps its previous centre.
    """
    X = np.asarray(X, dtype=np.float64)
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > len(X):
        raise ConfigError(f"k={k} exceeds the number of points ({len(X)})")
    centers = kmeans_plusplus(X, k, rng)
    labels, obj = _assign(X, centers)
    trace = [obj]
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
        new_labels, obj = _assign(X, centers)
        trace.append(obj)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centers, trace


def kmeans_cluster(feature_map, k=6, seed=0, iters=100):
    """Cluster the pixels of an ``(H, W, d)`` feature map; returns an ``(H, W)`` id map."""
    fm = np.asarray(feature_map)
    h, w, d = fm.shape
    labels, _, _ = lloyd(fm.reshape(h * w, d), k, np.random.default_rng(seed), iters)
    return labels.reshape(h, w)
