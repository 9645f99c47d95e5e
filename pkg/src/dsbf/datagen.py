"""Synthetic data: the linear structural model and toy multi-domain blobs.

Structural model, per domain ``j`` and sample row::

    H_j = U @ phi_j + L_j @ eta_j
    Y_j = H_j @ beta + L_j @ psi_j

``U`` is drawn once per sample index and shared by all domains (it is the
domain-invariant factor); each ``L_j`` is drawn independently per domain.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DomainDataset
from .numerics import derive_seeds, make_rng

DISTRIBUTIONS = ("normal", "uniform", "laplace")


def sample_zero_mean(rng: np.random.Generator, dist: str, size) -> np.ndarray:
    """Zero-mean, unit-variance draws from the named family."""
    if dist == "normal":
        return rng.standard_normal(size)
    if dist == "uniform":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size)
    if dist == "laplace":
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), size)
    raise ValueError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")


def _default_phi():
    return [[[1.0, 0.4], [-0.3, 0.9]],
            [[0.8, -0.2], [0.5, 1.1]],
            [[1.2, 0.3], [0.1, 0.7]]]


def _default_eta():
    return [[[0.9, 0.3], [0.2, 0.8]],
            [[0.6, -0.4], [0.3, 0.5]],
            [[0.7, 0.2], [-0.3, 0.6]]]


def _default_psi():
    return [[1.0, 0.8], [-0.6, 0.4], [0.5, -0.7]]


@dataclass
class StructuralSpec:
    """Linear world with domain-invariant and domain-specific factors.

    Domain 0 plays the labeled source, domain 1 the unlabeled source used by
    the estimator; further domains are available for pooling experiments.
    """

    d_h: int = 2
    k: int = 3
    phi: list = field(default_factory=_default_phi)
    eta: list = field(default_factory=_default_eta)
    beta: list = field(default_factory=lambda: [1.0, -0.5])
    psi: list = field(default_factory=_default_psi)
    dist_u: str = "normal"
    dist_l: str = "normal"
    n: int = 1000

    def __post_init__(self):
        self.phi = [np.asarray(p, dtype=np.float64) for p in self.phi]
        self.eta = [np.asarray(e, dtype=np.float64) for e in self.eta]
        self.psi = [np.asarray(p, dtype=np.float64) for p in self.psi]
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        d, k = self.d_h, self.k
        if k < 2:
            raise ValueError("need at least two domains")
        for name, mats in (("phi", self.phi), ("eta", self.eta)):
            if len(mats) != k or any(m.shape != (d, d) for m in mats):
                raise ValueError(f"{name} must hold {k} matrices of shape ({d}, {d})")
        if len(self.psi) != k or any(p.shape != (d,) for p in self.psi):
            raise ValueError(f"psi must hold {k} vectors of length {d}")
        if self.beta.shape != (d,):
            raise ValueError(f"beta must have length {d}")
        for dist in (self.dist_u, self.dist_l):
            if dist not in DISTRIBUTIONS:
                raise ValueError(f"unknown distribution {dist!r}")
        # E[U U^T] = I for every supported family
        for j, p in enumerate(self.phi):
            if np.linalg.eigvalsh(p.T @ p).min() <= 1e-10:
                raise ValueError(f"phi[{j}]^T E[UU^T] phi[{j}] is singular")

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("phi", "eta", "psi", "beta"):
            v = getattr(self, key)
            out[key] = [a.tolist() for a in v] if isinstance(v, list) else v.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "StructuralSpec":
        return cls(**obj)


def gen_structural(spec: StructuralSpec, rng: np.random.Generator, n: int | None = None,
                   *, return_latents: bool = False):
    """Draw ``n`` samples per domain; returns ``[(H_j, Y_j), ...]``.

    With ``return_latents`` a second value ``(U, [L_j, ...])`` is returned.
    """
    n = spec.n if n is None else n
    u = sample_zero_mean(rng, spec.dist_u, (n, spec.d_h))
    out, latents = [], []
    for j in range(spec.k):
        lat = sample_zero_mean(rng, spec.dist_l, (n, spec.d_h))
        h = u @ spec.phi[j] + lat @ spec.eta[j]
        y = h @ spec.beta + lat @ spec.psi[j]
        out.append((h, y))
        latents.append(lat)
    if return_latents:
        return out, (u, latents)
    return out


# -- toy classification domains ------------------------------------------


@dataclass
class DomainTransform:
    """How one domain deforms the shared class geometry.

    The 2-D class blobs are scaled, rotated and shifted. ``spurious_strength``
    and ``spurious_offset`` control extra features that track the class
    (``(label + offset) % C``) in this domain only.
    """

    angle_deg: float = 0.0
    scale: tuple = (1.0, 1.0)
    shift: tuple = (0.0, 0.0)
    spurious_strength: float = 0.0
    spurious_offset: int = 0
    name: str = ""


def _rotated_blob_domains():
    return [
        DomainTransform(0.0, (1.0, 1.0), (0.0, 0.0), 2.5, 0, "labeled"),
        DomainTransform(35.0, (1.3, 0.8), (0.5, -0.5), 0.0, 0, "unlabeled"),
        DomainTransform(70.0, (0.8, 1.2), (-0.5, 0.5), 2.5, 2, "target"),
    ]


@dataclass
class ToyDomainSpec:
    classes: int = 4
    n: int = 600
    radius: float = 2.0
    noise: float = 0.5
    spurious_noise: float = 0.5
    label_noise: float = 0.0
    domains: list = field(default_factory=_rotated_blob_domains)

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainTransform) else DomainTransform(**d)
                        for d in self.domains]
        for d in self.domains:
            d.scale = tuple(float(v) for v in d.scale)
            d.shift = tuple(float(v) for v in d.shift)
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must be in [0, 1)")

    @property
    def input_dim(self) -> int:
        return 2 + self.classes

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ToyDomainSpec":
        return cls(**obj)


def class_means(classes: int, radius: float) -> np.ndarray:
    ang = 2 * np.pi * np.arange(classes) / classes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_toy_domains(spec: ToyDomainSpec, seed: int) -> list[DomainDataset]:
    """Balanced labeled samples for every domain (labels are hidden later by
    the trainer, not here). Each domain draws from its own derived stream."""
    means = class_means(spec.classes, spec.radius)
    out = []
    for j, (tf, ss) in enumerate(zip(spec.domains, derive_seeds(seed, len(spec.domains)))):
        rng = make_rng(ss)
        y = np.arange(spec.n) % spec.classes
        rng.shuffle(y)
        base = means[y] + spec.noise * rng.standard_normal((spec.n, 2))
        t = np.deg2rad(tf.angle_deg)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        inv = base @ (rot @ np.diag(tf.scale)).T + np.asarray(tf.shift)
        spur = np.zeros((spec.n, spec.classes))
        spur[np.arange(spec.n), (y + tf.spurious_offset) % spec.classes] = tf.spurious_strength
        spur += spec.spurious_noise * rng.standard_normal((spec.n, spec.classes))
        if spec.label_noise > 0:
            flip = rng.random(spec.n) < spec.label_noise
            y = np.where(flip, rng.integers(0, spec.classes, spec.n), y)
        out.append(DomainDataset(j, np.hstack([inv, spur]), y, tf.name or f"domain{j}"))
    return out


def dump_spec(spec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
