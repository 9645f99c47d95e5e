"""Per-domain datasets and the CSV exchange format.

CSV layout (header required)::

    domain_id,label,feature_0,...,feature_{d-1}

``label`` is -1 for unlabeled rows. Floats are written with 17 significant
digits so files round-trip exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


@dataclass
class DomainDataset:
    domain_id: int
    x: np.ndarray
    y: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError(f"domain {self.domain_id}: x must be a non-empty 2-D array")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise ValueError(f"domain {self.domain_id}: {len(self.y)} labels for {len(self.x)} rows")
            if self.y.min() < 0:
                raise ValueError(f"domain {self.domain_id}: negative label")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def unlabeled(self) -> "DomainDataset":
        return replace(self, y=None)

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], y=None if self.y is None else self.y[idx])

    def split(self, train_fraction: float, rng: np.random.Generator):
        """Random (train, validation) split; validation keeps at least one row
        when the dataset has two or more."""
        perm = rng.permutation(self.n)
        cut = int(round(train_fraction * self.n))
        cut = min(max(cut, 1), self.n - 1) if self.n > 1 else self.n
        return self.subset(np.sort(perm[:cut])), self.subset(np.sort(perm[cut:]))


def write_csv(path, datasets, *, hide_labels=()) -> None:
    """Write datasets to one CSV; domains listed in ``hide_labels`` get label -1."""
    datasets = list(datasets)
    dim = datasets[0].x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain_id", "label"] + [f"feature_{i}" for i in range(dim)])
        for ds in datasets:
            if ds.x.shape[1] != dim:
                raise ValueError("all domains must share the feature dimension")
            hidden = ds.y is None or ds.domain_id in hide_labels
            for i in range(ds.n):
                label = -1 if hidden else int(ds.y[i])
                w.writerow([ds.domain_id, label] + [format(v, ".17g") for v in ds.x[i]])


def read_csv(path) -> list[DomainDataset]:
    """Read a dataset CSV into one :class:`DomainDataset` per ``domain_id``.

    A domain is labeled only if every one of its rows has a label >= 0.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if not header or header[:2] != ["domain_id", "label"]:
            raise ValueError(f"{path}: header must start with domain_id,label")
        rows = [row for row in r if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    out = []
    for dom in sorted(set(arr[:, 0].astype(int))):
        sel = arr[arr[:, 0] == dom]
        labels = sel[:, 1].astype(np.int64)
        y = labels if np.all(labels >= 0) else None
        if y is None and np.any(labels >= 0):
            raise ValueError(f"{path}: domain {dom} mixes labeled and unlabeled rows")
        out.append(DomainDataset(int(dom), sel[:, 2:], y, name=f"{path.stem}:{dom}"))
    return out
