"""Finite-difference checks of every training loss on small random models."""
from __future__ import annotations

import numpy as np

from . import losses as L
from .networks import block_of, build_model, finite_diff_check
from .numerics import make_rng

LOSS_NAMES = ("cl", "im", "cu", "fp", "bf", "s2")
TOLERANCE = 1e-4


def random_problem(seed: int, *, n_unlabeled: int = 2, n_classes: int = 4, batch: int = 12,
                   input_dim: int = 5):
    """A small model with non-trivial biases and alpha, plus a matched batch."""
    rng = make_rng(seed)
    model = build_model(input_dim, n_classes, n_unlabeled, rng, hidden_dim=8, feat_dim=8,
                        bottleneck_dim=6)
    for p in model.parameters().values():
        if p.ndim == 1 and p.size > 1:
            p[:] = rng.normal(scale=0.1, size=p.shape)
    model.alpha[:] = 0.3
    x1 = rng.normal(size=(batch, input_dim))
    y1 = rng.integers(0, n_classes, batch)
    xs = [rng.normal(size=(batch, input_dim)) for _ in range(n_unlabeled)]
    # roughly 60% agreement so both matched and unmatched pairs occur
    ps = [np.where(rng.random(batch) < 0.6, y1, rng.integers(0, n_classes, batch))
          for _ in range(n_unlabeled)]
    return model, L.Stage2Batch(x1, y1, xs, ps)


def _corrupt(grads: dict) -> dict:
    return {k: v * 1.01 + 1e-3 for k, v in grads.items()}


def check_seed(seed: int, h: float = 1e-5, fault: str | None = None,
               alpha_noise: float = 0.01) -> dict:
    """Max relative error per loss for one seed.

    ``fault`` names a loss whose analytic gradient is deliberately perturbed
    (used to confirm the checker fails loudly).
    """
    model, b = random_problem(seed)
    pairs = list(zip(b.x_unlabeled, b.pseudo))
    names = list(model.parameters())
    direct = {
        "cl": (lambda m: L.loss_cl(m, b.x_labeled, b.y_labeled), None),
        "im": (lambda m: L.loss_im(m, b.x_unlabeled), None),
        "cu": (lambda m: L.loss_cu(m, pairs), None),
        "fp": (lambda m: L.loss_fp(m, (b.x_labeled, b.y_labeled), pairs),
               [n for n in names if block_of(n) in L.ROUTES["fp"]]),
        "bf": (lambda m: L.loss_bf(m, b.y_labeled, pairs, alpha_noise),
               [n for n in names if block_of(n) in L.ROUTES["bf"]]),
    }
    out = {}
    for key, (fn, sel) in direct.items():
        def value_and_grad(m, fn=fn):
            r = fn(m)
            return r.value, r.grads
        analytic = value_and_grad(model)[1]
        if fault == key:
            analytic = _corrupt(analytic)
        out[key] = finite_diff_check(value_and_grad, model, h, names=sel, seed=seed, analytic=analytic)

    frozen = model.copy()
    _, grads = L.stage2_loss(model, b, 1.0, 1.0, alpha_noise=alpha_noise)
    if fault == "s2":
        grads = _corrupt(grads)
    out["s2"] = finite_diff_check(
        lambda m: (L.stage2_surrogate(m, frozen, b, 1.0, 1.0, alpha_noise=alpha_noise), None),
        model, h, seed=seed, analytic=grads)
    return out


def gradient_suite(seeds, h: float = 1e-5, fault: str | None = None) -> dict:
    """Worst relative error per loss across ``seeds``."""
    worst = dict.fromkeys(LOSS_NAMES, 0.0)
    for s in seeds:
        for k, v in check_seed(s, h, fault).items():
            worst[k] = max(worst[k], v)
    return worst
