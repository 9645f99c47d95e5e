"""Numpy implementations of the clustering kernels (fallback backend).

Must stay contract-identical to ``_ckernels.pyx``.
"""
import numpy as np


def cosine_assign(features, centroids):
    """Nearest centroid by cosine distance; ties go to the lowest class index.

    Returns ``(labels, min_distance, n_degenerate)`` where ``n_degenerate``
    counts zero-norm feature rows plus zero-norm centroids.
    """
    f = np.ascontiguousarray(features, dtype=np.float64)
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    # elementwise product + sum keeps identical rows bit-identical (no BLAS blocking)
    dots = np.sum(f[:, None, :] * c[None, :, :], axis=2)
    fn = np.sqrt(np.sum(f * f, axis=1))
    cn = np.sqrt(np.sum(c * c, axis=1))
    denom = fn[:, None] * cn[None, :]
    zero = denom == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(zero, 1.0, 1.0 - dots / np.where(zero, 1.0, denom))
    labels = np.argmin(dist, axis=1).astype(np.int64)
    mins = dist[np.arange(len(labels)), labels]
    n_degenerate = int(np.count_nonzero(fn == 0.0) + np.count_nonzero(cn == 0.0))
    return labels, mins, n_degenerate


def hard_centroids(features, labels, n_classes, previous):
    """Per-class means; classes with no members keep their ``previous`` row."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sums = np.zeros((n_classes, f.shape[1]))
    np.add.at(sums, labels, f)
    counts = np.bincount(labels, minlength=n_classes).astype(np.int64)
    out = np.array(previous, dtype=np.float64, copy=True)
    live = counts > 0
    out[live] = sums[live] / counts[live, None]
    return out, counts


def soft_centroids(features, probs, fallback):
    """Probability-weighted means; near-zero mass rows take ``fallback``."""
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    mass = p.sum(axis=0)
    weighted = p.T @ f
    out = np.tile(np.asarray(fallback, dtype=np.float64), (p.shape[1], 1))
    live = mass >= 1e-12
    out[live] = weighted[live] / mass[live, None]
    return out, mass
