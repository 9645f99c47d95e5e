"""Dense blocks, the DSBF model bundle, hand-written backprop and SGD.

Parameter names used in gradient bundles::

    g.<i>.weight / g.<i>.bias      backbone layers
    b.<i>.weight / b.<i>.bias      bottleneck layers
    c.weight / c.bias              classifier
    v.<j>.weight / v.<j>.bias      projection for unlabeled domain j (0-based)
    a_q.<j>.*, a_k.<j>.*, a_v.<j>.*  attention embeddings
    alpha                          attention gate
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DimensionError, NumericalError, as_matrix

CHECKPOINT_VERSION = 1
MAGIC = b"DSBFCKPT\n"
ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
             activation: str = "relu") -> "DenseLayer":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, size=(in_dim, out_dim)),
                   np.zeros(out_dim), activation)

    @classmethod
    def identity(cls, dim: int) -> "DenseLayer":
        return cls(np.eye(dim), np.zeros(dim), "identity")

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activation: str = "identity") -> "DenseLayer":
        return cls(np.zeros((in_dim, out_dim)), np.zeros(out_dim), activation)

    def forward(self, x: np.ndarray):
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"layer expects {self.in_dim} inputs, got {x.shape[1]}")
        pre = x @ self.weight + self.bias
        out = np.maximum(pre, 0.0) if self.activation == "relu" else pre
        return out, (x, pre)

    def backward(self, cache, dout: np.ndarray):
        x, pre = cache
        if self.activation == "relu":
            dout = dout * (pre > 0.0)
        return x.T @ dout, dout.sum(axis=0), dout @ self.weight.T


def stack_forward(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def stack_backward(layers, caches, dout, prefix: str, grads: dict):
    for i in range(len(layers) - 1, -1, -1):
        dw, db, dout = layers[i].backward(caches[i], dout)
        _accumulate(grads, f"{prefix}.{i}.weight", dw)
        _accumulate(grads, f"{prefix}.{i}.bias", db)
    return dout


def _accumulate(grads: dict, name: str, value: np.ndarray):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


@dataclass
class ModelBundle:
    """All trainable DSBF parameters.

    ``v``, ``a_q``, ``a_k`` and ``a_v`` hold one entry per unlabeled source
    domain, in domain order.
    """

    g: list
    b: list
    c: DenseLayer
    v: list
    a_q: list
    a_k: list
    a_v: list
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        n = len(self.v)
        if not (len(self.a_q) == len(self.a_k) == len(self.a_v) == n):
            raise DimensionError("v, a_q, a_k, a_v must have one entry per unlabeled domain")
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(1)

    @property
    def n_unlabeled(self) -> int:
        return len(self.v)

    @property
    def input_dim(self) -> int:
        return self.g[0].in_dim

    @property
    def feat_dim(self) -> int:
        return self.g[-1].out_dim

    @property
    def bottleneck_dim(self) -> int:
        return self.b[-1].out_dim

    @property
    def n_classes(self) -> int:
        return self.c.out_dim

    def blocks(self):
        """Yield ``(prefix, layers)`` for every list-valued block."""
        yield "g", self.g
        yield "b", self.b
        yield "v", self.v
        yield "a_q", self.a_q
        yield "a_k", self.a_k
        yield "a_v", self.a_v

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> live parameter array (mutating it mutates the model)."""
        params = {}
        for prefix, layers in self.blocks():
            for i, layer in enumerate(layers):
                params[f"{prefix}.{i}.weight"] = layer.weight
                params[f"{prefix}.{i}.bias"] = layer.bias
        params["c.weight"] = self.c.weight
        params["c.bias"] = self.c.bias
        params["alpha"] = self.alpha
        return params

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)


def block_of(name: str) -> str:
    return name.split(".", 1)[0]


def build_model(input_dim: int, n_classes: int, n_unlabeled: int,
                rng: np.random.Generator, *, hidden_dim: int = 64,
                feat_dim: int = 64, bottleneck_dim: int = 32) -> ModelBundle:
    """Backbone input->hidden->feat (relu), bottleneck feat->D (relu),
    linear classifier, linear projections feat->D, linear QKV embeddings."""
    g = [DenseLayer.init(input_dim, hidden_dim, rng),
         DenseLayer.init(hidden_dim, feat_dim, rng)]
    b = [DenseLayer.init(feat_dim, bottleneck_dim, rng)]
    c = DenseLayer.init(bottleneck_dim, n_classes, rng, "identity")
    v = [DenseLayer.init(feat_dim, bottleneck_dim, rng, "identity") for _ in range(n_unlabeled)]
    emb = lambda: [DenseLayer.init(bottleneck_dim, bottleneck_dim, rng, "identity")  # noqa: E731
                   for _ in range(n_unlabeled)]
    return ModelBundle(g=g, b=b, c=c, v=v, a_q=emb(), a_k=emb(), a_v=emb())


@dataclass
class Trace:
    """Intermediates of one ``c o b o g`` forward pass."""

    backbone: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    g_caches: list
    b_caches: list
    c_cache: tuple


def forward(model: ModelBundle, x) -> Trace:
    x = as_matrix(x, "x")
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"x has {x.shape[1]} columns, model expects {model.input_dim}")
    backbone, g_caches = stack_forward(model.g, x)
    features, b_caches = stack_forward(model.b, backbone)
    logits, c_cache = model.c.forward(features)
    return Trace(backbone, features, logits, g_caches, b_caches, c_cache)


def forward_backbone(model: ModelBundle, x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"x has {x.shape[1]} columns, model expects {model.input_dim}")
    return stack_forward(model.g, x)[0]


def forward_features(model: ModelBundle, x) -> np.ndarray:
    """Semantic features ``b(g(x))``."""
    return stack_forward(model.b, forward_backbone(model, x))[0]


def forward_logits(model: ModelBundle, x) -> np.ndarray:
    return forward(model, x).logits


def forward_projection(model: ModelBundle, j: int, x) -> np.ndarray:
    """``v_j(g(x))`` for unlabeled domain ``j`` (0-based among unlabeled domains)."""
    if not 0 <= j < model.n_unlabeled:
        raise IndexError(f"unlabeled domain index {j} out of range [0, {model.n_unlabeled})")
    return model.v[j].forward(forward_backbone(model, x))[0]


def backward_logits(model: ModelBundle, trace: Trace, dlogits: np.ndarray,
                    grads: dict | None = None) -> dict:
    """Backprop a gradient on the logits into ``c``, ``b`` and ``g``."""
    grads = {} if grads is None else grads
    dw, db, dfeat = model.c.backward(trace.c_cache, dlogits)
    _accumulate(grads, "c.weight", dw)
    _accumulate(grads, "c.bias", db)
    dback = stack_backward(model.b, trace.b_caches, dfeat, "b", grads)
    stack_backward(model.g, trace.g_caches, dback, "g", grads)
    return grads


# -- optimizer -----------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(model: ModelBundle, grads: dict, cfg: SgdConfig, state: dict) -> None:
    """One momentum-SGD update of the parameters named in ``grads``.

    ``velocity = momentum * velocity + grad + weight_decay * p`` then
    ``p -= lr * velocity``; ``alpha`` is never decayed. ``state`` holds the
    velocity buffers and is updated in place.
    """
    params = model.parameters()
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        grad = np.asarray(grad, dtype=np.float64).reshape(p.shape)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient in block {block_of(name)!r} ({name})")
        step = grad if name == "alpha" else grad + cfg.weight_decay * p
        vel = state.get(name)
        vel = step.copy() if vel is None else cfg.momentum * vel + step
        state[name] = vel
        p -= cfg.learning_rate * vel
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite parameter after update in {name}")


# -- gradient checking ---------------------------------------------------


def finite_diff_check(loss_fn, model: ModelBundle, h: float = 1e-5, *,
                      names=None, n_coords: int = 200, seed: int = 0,
                      analytic: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(model)`` must return ``(value, grads)``. Coordinates are sampled
    evenly across the selected parameter arrays (all of them when there are
    fewer than ``n_coords``); parameters missing from ``grads`` are treated as
    having zero analytic gradient. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = model.parameters()
    names = list(params) if names is None else list(names)
    if analytic is None:
        analytic = loss_fn(model)[1]
    rng = np.random.default_rng(seed)

    total = sum(params[n].size for n in names)
    coords = []
    if total <= n_coords:
        coords = [(n, i) for n in names for i in range(params[n].size)]
    else:
        per = int(np.ceil(n_coords / len(names)))
        for n in names:
            size = params[n].size
            take = min(size, per)
            coords += [(n, int(i)) for i in rng.choice(size, size=take, replace=False)]

    worst = 0.0
    for name, idx in coords:
        flat = params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_fn(model)[0]
        flat[idx] = orig - h
        down = loss_fn(model)[0]
        flat[idx] = orig
        numeric = (up - down) / (2 * h)
        g = analytic.get(name)
        a = 0.0 if g is None else float(np.asarray(g).reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(model: ModelBundle, path) -> None:
    """Write ``DSBFCKPT\n`` + one JSON header line + raw little-endian float64 data.

    The header lists every parameter's name and shape in storage order and the
    layer activations; output bytes depend only on the parameters.
    """
    params = model.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "activations": {p: [l.activation for l in layers] for p, layers in model.blocks()},
        "c_activation": model.c.activation,
        "arrays": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelBundle:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a DSBF checkpoint")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    offset = end + 1
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("checkpoint has trailing or missing data")
    blocks = {
        prefix: [DenseLayer(arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"], act)
                 for i, act in enumerate(acts)]
        for prefix, acts in header["activations"].items()
    }
    c = DenseLayer(arrays["c.weight"], arrays["c.bias"], header["c_activation"])
    return ModelBundle(c=c, alpha=arrays["alpha"], **blocks)
