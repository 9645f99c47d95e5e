"""Inter-domain attention over the projected features of the unlabeled domains.

For domains ``m, j`` (both among the unlabeled domains)::

    p[m, j] = softmax_j( key_m^T query_j )     elementwise, D x D
    z[m]    = mean_j p[m, j]
    q[m]    = alpha * value_m @ z[m] + value_m

The softmax runs over the domain axis separately at every matrix position,
so ``sum_j p[m, j]`` is the all-ones matrix and ``z[m]`` equals ``ones / J``
whatever the embeddings are. Consequently the query and key embeddings get
zero gradient (up to rounding); they are still computed and backpropagated so the
module stays a literal implementation of the formulas above.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import ModelBundle, _accumulate
from .numerics import DimensionError


@dataclass
class AttentionIO:
    o_query: list
    o_key: list
    o_value: list
    p: np.ndarray  # (J, J, D, D), p[m, j]
    z: np.ndarray  # (J, D, D)
    q: list
    alpha: float
    caches: dict


def embed(model: ModelBundle, projections):
    """Query, key and value embeddings of each unlabeled domain's projection."""
    if len(projections) != model.n_unlabeled:
        raise DimensionError(
            f"expected {model.n_unlabeled} projections, got {len(projections)}")
    oq, ok, ov, caches = [], [], [], []
    for j, proj in enumerate(projections):
        q, cq = model.a_q[j].forward(proj)
        k, ck = model.a_k[j].forward(proj)
        v, cv = model.a_v[j].forward(proj)
        oq.append(q)
        ok.append(k)
        ov.append(v)
        caches.append((cq, ck, cv))
    return oq, ok, ov, caches


def similarity(o_key_m: np.ndarray, o_query) -> np.ndarray:
    """Normalized similarity maps ``p[m, .]`` of one domain, shape (J, D, D)."""
    raw = np.stack([o_key_m.T @ oq for oq in o_query])
    raw = raw - raw.max(axis=0, keepdims=True)
    e = np.exp(raw)
    return e / e.sum(axis=0, keepdims=True)


def aggregate(p_m: np.ndarray) -> np.ndarray:
    return p_m.mean(axis=0)


def reweight(o_value_m: np.ndarray, z_m: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * (o_value_m @ z_m) + o_value_m


def attention_forward(model: ModelBundle, projections, alpha_noise: float = 0.0) -> AttentionIO:
    """Run embed -> similarity -> aggregate -> reweight for every domain.

    ``alpha_noise`` is added to the gate value for this pass only; the
    gradient still lands on the stored ``alpha``.
    """
    oq, ok, ov, emb_caches = embed(model, projections)
    alpha = float(model.alpha[0]) + alpha_noise
    n = len(ok)
    raw = np.stack([np.stack([ok[m].T @ q for q in oq]) for m in range(n)])
    e = np.exp(raw - raw.max(axis=1, keepdims=True))
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    # mean_j p[m, j] with the shared denominator factored out; avoids the
    # last-bit drift of summing already-normalized maps
    z = (e.sum(axis=1) / denom[:, 0]) / n
    q = [reweight(ov[m], z[m], alpha) for m in range(len(ov))]
    return AttentionIO(oq, ok, ov, p, z, q, alpha, {"embed": emb_caches})


def attention_backward(model: ModelBundle, io: AttentionIO, dq, grads: dict | None = None):
    """Backprop ``dq`` (one B x D array per domain).

    Returns ``(grads, dprojections)``; ``grads`` gains entries for the
    embeddings and ``alpha``.
    """
    grads = {} if grads is None else grads
    n = len(io.q)
    d_oq = [np.zeros_like(a) for a in io.o_query]
    d_ok = [np.zeros_like(a) for a in io.o_key]
    d_ov = [np.zeros_like(a) for a in io.o_value]
    dalpha = 0.0
    for m in range(n):
        g = dq[m]
        vz = io.o_value[m] @ io.z[m]
        dalpha += float(np.sum(g * vz))
        d_ov[m] += g + io.alpha * (g @ io.z[m].T)
        dz = io.alpha * (io.o_value[m].T @ g)
        dp = np.broadcast_to(dz / n, io.p[m].shape)
        ds = io.p[m] * (dp - np.sum(io.p[m] * dp, axis=0, keepdims=True))
        for j in range(n):
            d_ok[m] += io.o_query[j] @ ds[j].T
            d_oq[j] += io.o_key[m] @ ds[j]
    _accumulate(grads, "alpha", np.array([dalpha]))

    dproj = []
    for j in range(n):
        cq, ck, cv = io.caches["embed"][j]
        total = None
        for prefix, layer, cache, dout in (("a_q", model.a_q[j], cq, d_oq[j]),
                                           ("a_k", model.a_k[j], ck, d_ok[j]),
                                           ("a_v", model.a_v[j], cv, d_ov[j])):
            dw, db, dx = layer.backward(cache, dout)
            _accumulate(grads, f"{prefix}.{j}.weight", dw)
            _accumulate(grads, f"{prefix}.{j}.bias", db)
            total = dx if total is None else total + dx
        dproj.append(total)
    return grads, dproj
