"""Training losses with analytic gradients.

Every loss returns a :class:`LossValue` whose ``grads`` cover all parameter
blocks the loss's graph touches. Which blocks a loss is *allowed* to update
during training is a separate concern, handled by :data:`ROUTES` and
:func:`route`:

=====  ==========================================
loss   updated blocks
=====  ==========================================
cl     g, b, c
im     g, b
cu     g, b
fp     v            (labeled features are a fixed target)
bf     c, a_q, a_k, a_v, alpha, v
=====  ==========================================

The projection and bias-filtering losses take backbone features as inputs,
so the stop-gradient on ``g`` is structural, not a zeroing step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import attention_backward, attention_forward
from .networks import (ModelBundle, _accumulate, backward_logits, block_of, forward,
                       forward_backbone, forward_features)
from .numerics import (clamped_log, clamped_log_grad, softmax_backward, softmax_rows)

ROUTES = {
    "cl": frozenset({"g", "b", "c"}),
    "im": frozenset({"g", "b"}),
    "cu": frozenset({"g", "b"}),
    "fp": frozenset({"v"}),
    "bf": frozenset({"c", "a_q", "a_k", "a_v", "alpha", "v"}),
}


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def route(grads: dict, blocks) -> dict:
    """Keep only gradients of parameters in the named blocks."""
    return {k: v for k, v in grads.items() if block_of(k) in blocks}


def add_scaled(total: dict, grads: dict, scale: float) -> dict:
    for k, v in grads.items():
        _accumulate(total, k, scale * v)
    return total


def _as_targets(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        return one_hot(y, n_classes)
    return y.astype(np.float64)


def cross_entropy(logits: np.ndarray, targets: np.ndarray, weights=None):
    """Weighted mean cross-entropy with a clamped log.

    ``weights`` (0/1 per row) selects rows; the mean is over selected rows
    and an empty selection gives 0. Returns ``(value, dlogits)``.
    """
    probs = softmax_rows(logits)
    per_row = -np.sum(targets * clamped_log(probs), axis=1)
    w = np.ones(len(per_row)) if weights is None else np.asarray(weights, dtype=np.float64)
    count = w.sum()
    if count == 0:
        return 0.0, np.zeros_like(logits)
    value = float(np.sum(w * per_row) / count)
    dprobs = -targets * clamped_log_grad(probs) * (w / count)[:, None]
    return value, softmax_backward(probs, dprobs)


def information_maximization(logits: np.ndarray):
    """``sum_r t_r log t_r - mean_i sum_r u_ir log u_ir`` and its logit gradient."""
    probs = softmax_rows(logits)
    b = probs.shape[0]
    t = probs.mean(axis=0)
    value = float(np.sum(t * clamped_log(t)) - np.mean(np.sum(probs * clamped_log(probs), axis=1)))
    dt = clamped_log(t) + t * clamped_log_grad(t)
    dself = clamped_log(probs) + probs * clamped_log_grad(probs)
    dprobs = (dt[None, :] - dself) / b
    return value, softmax_backward(probs, dprobs)


# -- public losses over raw inputs ---------------------------------------


def loss_cl(model: ModelBundle, x, y) -> LossValue:
    """Cross-entropy of the labeled source."""
    tr = forward(model, x)
    value, dlogits = cross_entropy(tr.logits, _as_targets(y, model.n_classes))
    return LossValue(value, backward_logits(model, tr, dlogits))


def loss_im(model: ModelBundle, unlabeled) -> LossValue:
    """Information maximization averaged over the unlabeled domains."""
    n = len(unlabeled)
    total, grads = 0.0, {}
    for x in unlabeled:
        tr = forward(model, x)
        value, dlogits = information_maximization(tr.logits)
        total += value / n
        backward_logits(model, tr, dlogits / n, grads)
    return LossValue(total, grads)


def loss_cu(model: ModelBundle, unlabeled) -> LossValue:
    """Pseudo-label cross-entropy averaged over ``[(x_j, pseudo_j), ...]``.

    The returned gradient includes ``c``; training drops it via :data:`ROUTES`.
    """
    n = len(unlabeled)
    total, grads = 0.0, {}
    for x, yhat in unlabeled:
        tr = forward(model, x)
        value, dlogits = cross_entropy(tr.logits, _as_targets(yhat, model.n_classes))
        total += value / n
        backward_logits(model, tr, dlogits / n, grads)
    return LossValue(total, grads)


def match_masks(y_labeled, pseudo_list) -> list:
    """Positional agreement indicators between labeled and pseudo labels."""
    y = np.asarray(y_labeled)
    return [(y == np.asarray(p)).astype(np.float64) for p in pseudo_list]


def loss_fp(model: ModelBundle, labeled_batch, unlabeled_batches) -> LossValue:
    """Feature projection loss; only the projections receive gradient."""
    x1, y1 = labeled_batch
    target = forward_features(model, x1)
    backbones = [forward_backbone(model, x) for x, _ in unlabeled_batches]
    masks = match_masks(y1, [p for _, p in unlabeled_batches])
    return projection_loss(model, target, backbones, masks)


def loss_bf(model: ModelBundle, labeled_labels, unlabeled_batches,
            alpha_noise: float = 0.0) -> LossValue:
    """Bias-filtering cross-entropy of the attended projections."""
    backbones = [forward_backbone(model, x) for x, _ in unlabeled_batches]
    masks = match_masks(labeled_labels, [p for _, p in unlabeled_batches])
    return bias_filtering_loss(model, backbones, labeled_labels, masks, alpha_noise)


# -- feature-level forms used by the trainer -----------------------------


def projection_loss(model: ModelBundle, target: np.ndarray, backbones, masks) -> LossValue:
    """Mean squared distance between ``target`` rows and ``v_j(backbone_j)`` rows.

    Per domain the mean runs over matched pairs; domains without any match
    contribute nothing and are left out of the domain average.
    """
    terms, grads, dgrads = [], {}, []
    for j, (back, s) in enumerate(zip(backbones, masks)):
        count = s.sum()
        if count == 0:
            continue
        proj, cache = model.v[j].forward(back)
        diff = proj - target
        terms.append(float(np.sum(s * np.sum(diff * diff, axis=1)) / count))
        dgrads.append((j, cache, 2.0 * diff * (s / count)[:, None]))
    if not terms:
        return LossValue(0.0, {})
    n = len(terms)
    for j, cache, dproj in dgrads:
        dw, db, _ = model.v[j].backward(cache, dproj / n)
        _accumulate(grads, f"v.{j}.weight", dw)
        _accumulate(grads, f"v.{j}.bias", db)
    return LossValue(sum(terms) / n, grads)


def bias_filtering_loss(model: ModelBundle, backbones, labels, masks,
                        alpha_noise: float = 0.0) -> LossValue:
    """Cross-entropy of ``c(w(v_j(backbone_j)))`` against the labeled-source
    labels on matched pairs, averaged over all unlabeled domains."""
    n = model.n_unlabeled
    targets = _as_targets(labels, model.n_classes)
    proj_caches, projections = [], []
    for j, back in enumerate(backbones):
        proj, cache = model.v[j].forward(back)
        projections.append(proj)
        proj_caches.append(cache)
    att = attention_forward(model, projections, alpha_noise)

    total, grads, dq = 0.0, {}, []
    for j in range(n):
        logits, c_cache = model.c.forward(att.q[j])
        value, dlogits = cross_entropy(logits, targets, masks[j])
        total += value / n
        dw, db, dqj = model.c.backward(c_cache, dlogits / n)
        _accumulate(grads, "c.weight", dw)
        _accumulate(grads, "c.bias", db)
        dq.append(dqj)
    _, dproj = attention_backward(model, att, dq, grads)
    for j in range(n):
        dw, db, _ = model.v[j].backward(proj_caches[j], dproj[j])
        _accumulate(grads, f"v.{j}.weight", dw)
        _accumulate(grads, f"v.{j}.bias", db)
    return LossValue(total, grads)


def stage_losses(lam: float, gamma: float, parts: dict) -> tuple[float, float]:
    """Merged objectives: ``(L_CL, lam*(L_IM+L_CU) + gamma*(L_FP+L_BF))``."""
    s1 = parts.get("cl", 0.0)
    s2 = lam * (parts["im"] + parts["cu"]) + gamma * (parts["fp"] + parts["bf"])
    return s1, s2


# -- one stage-2 step ----------------------------------------------------


@dataclass
class Stage2Batch:
    """Class-aligned batch: row ``i`` of every array belongs to the same draw."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: list
    pseudo: list


def stage2_loss(model: ModelBundle, batch: Stage2Batch, lam: float, gamma: float, *,
                alpha_noise: float = 0.0, add_cl: bool = False):
    """Loss parts and the routed gradient of one bias-filtering step.

    Returns ``(parts, grads)`` where ``parts`` has keys ``im, cu, fp, bf, s2``
    (plus ``cl`` when ``add_cl``) and ``grads`` is already routed.
    """
    n = model.n_unlabeled
    grads, parts = {}, {"im": 0.0, "cu": 0.0}
    backbones = []
    for x, yhat in zip(batch.x_unlabeled, batch.pseudo):
        tr = forward(model, x)
        backbones.append(tr.backbone)
        v_im, d_im = information_maximization(tr.logits)
        v_cu, d_cu = cross_entropy(tr.logits, one_hot(yhat, model.n_classes))
        parts["im"] += v_im / n
        parts["cu"] += v_cu / n
        g = backward_logits(model, tr, lam * (d_im + d_cu) / n)
        add_scaled(grads, route(g, ROUTES["cu"]), 1.0)

    masks = match_masks(batch.y_labeled, batch.pseudo)
    target = forward_features(model, batch.x_labeled)
    fp = projection_loss(model, target, backbones, masks)
    bf = bias_filtering_loss(model, backbones, batch.y_labeled, masks, alpha_noise)
    parts["fp"], parts["bf"] = fp.value, bf.value
    add_scaled(grads, route(fp.grads, ROUTES["fp"]), gamma)
    add_scaled(grads, route(bf.grads, ROUTES["bf"]), gamma)

    _, parts["s2"] = stage_losses(lam, gamma, parts)
    if add_cl:
        cl = loss_cl(model, batch.x_labeled, batch.y_labeled)
        parts["cl"] = cl.value
        parts["s2"] += cl.value
        add_scaled(grads, route(cl.grads, ROUTES["cl"]), 1.0)
    return parts, grads


def stage2_surrogate(model: ModelBundle, frozen: ModelBundle, batch: Stage2Batch,
                     lam: float, gamma: float, *, alpha_noise: float = 0.0,
                     add_cl: bool = False) -> float:
    """Scalar whose exact gradient at ``model == frozen`` is the routed step gradient.

    Blocks a loss may not update are read from ``frozen``: the classifier in
    the pseudo-label terms, and the backbone/bottleneck in the projection and
    bias-filtering terms. Used only for gradient checking.
    """
    debias_model = replace(model, c=frozen.c)
    im = loss_im(debias_model, batch.x_unlabeled).value
    cu = loss_cu(debias_model, list(zip(batch.x_unlabeled, batch.pseudo))).value
    backbones = [forward_backbone(frozen, x) for x in batch.x_unlabeled]
    target = forward_features(frozen, batch.x_labeled)
    masks = match_masks(batch.y_labeled, batch.pseudo)
    fp = projection_loss(model, target, backbones, masks).value
    bf = bias_filtering_loss(model, backbones, batch.y_labeled, masks, alpha_noise).value
    value = lam * (im + cu) + gamma * (fp + bf)
    if add_cl:
        value += loss_cl(model, batch.x_labeled, batch.y_labeled).value
    return value
