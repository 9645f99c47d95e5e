"""Cluster-based pseudo labels for unlabeled domains.

Procedure for ``rounds >= 1``: prediction-weighted (soft) centroids of the
semantic features, cosine-nearest assignment to them, then ``rounds``
refinements (hard per-class means + re-assignment). ``rounds == 0`` uses the
classifier's argmax directly.
"""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .networks import ModelBundle, forward
from .numerics import DegenerateFeatureWarning, DimensionError, softmax_rows

SOFT, HARD = 0, 1


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (C, D)
    stage: int = SOFT
    domain: int = 0
    empty: np.ndarray | None = None  # bool (C,), classes with no support

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]


@dataclass
class PseudoLabels:
    initial: np.ndarray
    final: np.ndarray
    n_classes: int
    domain: int = 0
    min_distance: np.ndarray | None = None

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.final), self.n_classes))
        out[np.arange(len(self.final)), self.final] = 1.0
        return out


def soft_centroids(features, probs, domain: int = 0) -> CentroidSet:
    """Class centroids weighted by predicted probabilities.

    A class whose total probability mass is below 1e-12 gets the global
    feature mean and is flagged in ``empty``.
    """
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if f.shape[0] != p.shape[0]:
        raise DimensionError(f"{f.shape[0]} feature rows vs {p.shape[0]} probability rows")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    cents, mass = kernels.soft_centroids(f, p, f.mean(axis=0))
    return CentroidSet(cents, SOFT, domain, mass < 1e-12)


def assign_nearest(features, cents: CentroidSet):
    """Cosine-nearest centroid per row (lowest class index wins ties).

    Returns ``(labels, min_distance)``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != cents.centroids.shape[1]:
        raise DimensionError(
            f"features {f.shape} incompatible with centroids {cents.centroids.shape}")
    labels, mins, n_degenerate = kernels.cosine_assign(f, cents.centroids)
    if n_degenerate:
        warnings.warn(f"{n_degenerate} zero-norm vectors in cosine assignment",
                      DegenerateFeatureWarning, stacklevel=2)
    return labels, mins


def refine(features, labels, previous: CentroidSet):
    """Hard per-class means of ``features`` under ``labels``, then re-assign.

    Classes without members keep their centroid from ``previous``.
    Returns ``(CentroidSet, new_labels, min_distance)``.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = previous.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    cents, counts = kernels.hard_centroids(f, labels, c, previous.centroids)
    new = CentroidSet(cents, HARD, previous.domain, counts == 0)
    new_labels, mins = assign_nearest(f, new)
    return new, new_labels, mins


def cluster_labels(features, probs, rounds: int = 1, domain: int = 0) -> PseudoLabels:
    """Pseudo labels from precomputed features and class probabilities."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[1]
    if rounds == 0:
        pred = np.argmax(probs, axis=1).astype(np.int64)
        return PseudoLabels(pred, pred.copy(), n_classes, domain)
    cents = soft_centroids(features, probs, domain)
    initial, mins = assign_nearest(features, cents)
    labels = initial
    for _ in range(rounds):
        cents, labels, mins = refine(features, labels, cents)
    return PseudoLabels(initial, labels, n_classes, domain, mins)


def assign_pseudo_labels(model: ModelBundle, data, rounds: int = 1, domain: int = 0) -> PseudoLabels:
    """Pseudo labels for an unlabeled dataset (or bare sample matrix) under a frozen model."""
    x = data.x if hasattr(data, "x") else data
    tr = forward(model, x)
    return cluster_labels(tr.features, softmax_rows(tr.logits), rounds, domain)


def write_pseudo_csv(path, epoch: int, labels: list[PseudoLabels]) -> None:
    """Append ``epoch, domain, sample_id, d, yhat, min_distance`` rows."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "domain", "sample_id", "d", "yhat", "min_distance"])
        for pl in labels:
            mins = pl.min_distance if pl.min_distance is not None else np.full(len(pl.final), np.nan)
            for i, (d, y, md) in enumerate(zip(pl.initial, pl.final, mins)):
                w.writerow([epoch, pl.domain, i, int(d), int(y), f"{md:.10g}"])
