"""Two-stage DSBF training: labeled-source initialization, then bias filtering.

The target domain never reaches :func:`stage1` or :func:`stage2`; it is
only seen by :func:`evaluate`, called from the per-epoch metrics callback
that :func:`run_experiment` builds.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DomainDataset
from .losses import Stage2Batch, loss_cl, route, ROUTES, stage2_loss
from .networks import ModelBundle, SgdConfig, build_model, forward_logits, save_checkpoint, sgd_step
from .numerics import derive_seeds, make_rng
from .pseudolabel import PseudoLabels, assign_pseudo_labels, write_pseudo_csv

MODES = ("sldg", "cdg", "stage1_only")
METRIC_COLUMNS = ("epoch", "stage", "l_cl", "l_im", "l_cu", "l_fp", "l_bf", "acc_labeled",
                  "acc_unlabeled_mean", "acc_target", "pseudo_acc_mean", "alpha")


class ConfigError(ValueError):
    """Invalid training configuration or dataset roles."""


@dataclass
class TrainConfig:
    m_iters: int = 20
    n_iters: int = 20
    lam: float = 1.0
    gamma: float = 1.0
    sgd: SgdConfig = field(default_factory=SgdConfig)
    batch_classes: int = 4
    per_class: int = 16
    cluster_rounds: int = 1
    seed: int = 0
    mode: str = "sldg"
    add_cl_to_stage2: bool = False
    alpha_eps: float = 1e-3
    train_fraction: float = 0.9
    hidden_dim: int = 64
    feat_dim: int = 64
    bottleneck_dim: int = 32

    def __post_init__(self):
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.m_iters < 0 or self.n_iters < 0:
            raise ConfigError("m_iters and n_iters must be >= 0")
        if self.batch_classes < 1 or self.per_class < 1:
            raise ConfigError("batch_classes and per_class must be >= 1")
        if self.cluster_rounds < 0:
            raise ConfigError("cluster_rounds must be >= 0")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.alpha_eps < 0:
            raise ConfigError("alpha_eps must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.batch_classes * self.per_class

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in fields(cls)}


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    l_cl: float = 0.0
    l_im: float = 0.0
    l_cu: float = 0.0
    l_fp: float = 0.0
    l_bf: float = 0.0
    acc_labeled: float = float("nan")
    acc_unlabeled_mean: float = float("nan")
    acc_target: float = float("nan")
    pseudo_acc_mean: float = float("nan")
    alpha: float = 0.0

    def row(self) -> list:
        out = []
        for col in METRIC_COLUMNS:
            v = getattr(self, col)
            out.append(str(v) if isinstance(v, int) else format(v, ".10g"))
        return out


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for rec in self.records:
                w.writerow(rec.row())


def evaluate(model: ModelBundle, dataset: DomainDataset) -> float:
    """Top-1 accuracy of ``argmax c(b(g(x)))`` (lowest index on ties)."""
    if dataset.y is None:
        raise ValueError(f"domain {dataset.domain_id} has no labels to evaluate against")
    pred = np.argmax(forward_logits(model, dataset.x), axis=1)
    return float(np.mean(pred == dataset.y))


def predict(model: ModelBundle, x) -> np.ndarray:
    return np.argmax(forward_logits(model, x), axis=1)


# -- stage 1 -------------------------------------------------------------


def stage1(model: ModelBundle, labeled: DomainDataset, cfg: TrainConfig, rng: np.random.Generator,
           opt_state: dict | None = None, on_epoch=None, first_epoch: int = 1) -> RunMetrics:
    """``cfg.m_iters`` epochs of minibatch SGD on the labeled cross-entropy."""
    if labeled.y is None:
        raise ConfigError("stage 1 needs a labeled source domain")
    opt_state = {} if opt_state is None else opt_state
    metrics = RunMetrics()
    bs = cfg.batch_size
    for e in range(cfg.m_iters):
        perm = rng.permutation(labeled.n)
        total, steps = 0.0, 0
        for start in range(0, labeled.n, bs):
            idx = perm[start:start + bs]
            res = loss_cl(model, labeled.x[idx], labeled.y[idx])
            sgd_step(model, route(res.grads, ROUTES["cl"]), cfg.sgd, opt_state)
            total += res.value
            steps += 1
        rec = EpochRecord(first_epoch + e, 1, l_cl=total / steps, alpha=float(model.alpha[0]))
        if on_epoch is not None:
            on_epoch(model, rec, None)
        metrics.append(rec)
    return metrics


# -- stage 2 -------------------------------------------------------------


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    return rng.choice(pool, size=k, replace=len(pool) < k)


def class_conditional_batches(labeled: DomainDataset, unlabeled_x: list, pseudo: list,
                              cfg: TrainConfig, rng: np.random.Generator):
    """Endless stream of class-aligned :class:`Stage2Batch` objects.

    Each step draws ``batch_classes`` distinct classes (from those present in
    the labeled source); per class, ``per_class`` labeled rows of that class
    and ``per_class`` rows of each unlabeled domain whose pseudo label is that
    class. Short pools are sampled with replacement; a domain with no row of
    that class contributes random rows, which then never match.
    """
    classes = np.unique(labeled.y)
    k = min(cfg.batch_classes, len(classes))
    by_class = {c: np.flatnonzero(labeled.y == c) for c in classes}
    pools = [{c: np.flatnonzero(p == c) for c in classes} for p in pseudo]
    sizes = [x.shape[0] for x in unlabeled_x]
    while True:
        chosen = rng.choice(classes, size=k, replace=False)
        lab_idx = np.concatenate([_draw(rng, by_class[c], cfg.per_class) for c in chosen])
        xs, ps = [], []
        for x, p, pool, n in zip(unlabeled_x, pseudo, pools, sizes):
            idx = np.concatenate([
                _draw(rng, pool[c], cfg.per_class) if len(pool[c]) else _draw(rng, np.arange(n), cfg.per_class)
                for c in chosen])
            xs.append(x[idx])
            ps.append(p[idx])
        yield Stage2Batch(labeled.x[lab_idx], labeled.y[lab_idx], xs, ps)


def stage2(model: ModelBundle, labeled: DomainDataset, unlabeled: list, cfg: TrainConfig,
           rng: np.random.Generator, opt_state: dict | None = None, on_epoch=None,
           first_epoch: int = 1, pseudo_csv=None) -> RunMetrics:
    """``cfg.n_iters`` bias-filtering epochs.

    Every epoch re-labels the unlabeled domains from a frozen snapshot (or
    uses their true labels in ``cdg`` mode), then takes
    ``max(1, n_labeled // batch_size)`` class-conditional SGD steps.
    """
    if labeled.y is None:
        raise ConfigError("stage 2 needs a labeled source domain")
    if cfg.n_iters and not unlabeled:
        raise ConfigError(f"mode {cfg.mode!r} needs at least one additional source domain")
    if cfg.mode == "cdg" and any(d.y is None for d in unlabeled):
        raise ConfigError("cdg mode needs labels for every source domain")
    if model.n_unlabeled != len(unlabeled):
        raise ConfigError(f"model has {model.n_unlabeled} projection heads for {len(unlabeled)} domains")
    opt_state = {} if opt_state is None else opt_state
    metrics = RunMetrics()
    steps = max(1, labeled.n // cfg.batch_size)
    for e in range(cfg.n_iters):
        epoch = first_epoch + e
        if cfg.mode == "cdg":
            pseudo = [PseudoLabels(d.y, d.y, model.n_classes, j) for j, d in enumerate(unlabeled)]
        else:
            snapshot = model.copy()
            pseudo = [assign_pseudo_labels(snapshot, d.x, cfg.cluster_rounds, j)
                      for j, d in enumerate(unlabeled)]
        if pseudo_csv is not None:
            write_pseudo_csv(pseudo_csv, epoch, pseudo)
        stream = class_conditional_batches(labeled, [d.x for d in unlabeled],
                                           [p.final for p in pseudo], cfg, rng)
        sums = dict.fromkeys(("cl", "im", "cu", "fp", "bf"), 0.0)
        for _ in range(steps):
            batch = next(stream)
            noise = cfg.alpha_eps * rng.random()
            parts, grads = stage2_loss(model, batch, cfg.lam, cfg.gamma, alpha_noise=noise,
                                       add_cl=cfg.add_cl_to_stage2)
            sgd_step(model, grads, cfg.sgd, opt_state)
            for k in sums:
                sums[k] += parts.get(k, 0.0)
        rec = EpochRecord(epoch, 2, *(sums[k] / steps for k in ("cl", "im", "cu", "fp", "bf")),
                          alpha=float(model.alpha[0]))
        if on_epoch is not None:
            on_epoch(model, rec, pseudo)
        metrics.append(rec)
    return metrics


# -- orchestration -------------------------------------------------------


@dataclass
class RunResult:
    model: ModelBundle
    metrics: RunMetrics
    summary: dict


def run_experiment(labeled: DomainDataset, sources: list, target: DomainDataset | None,
                   cfg: TrainConfig, out_dir=None, *, dump_pseudo: bool = False,
                   spec_echo: dict | None = None) -> RunResult:
    """Split, train per ``cfg.mode`` and (optionally) write outputs.

    ``sources`` are the additional source domains. Their labels, if present,
    are hidden from training in ``sldg`` mode and used only for logging.
    Outputs in ``out_dir``: ``metrics.csv``, ``alpha.csv``, ``summary.json``,
    ``model.ckpt`` (and ``pseudo_labels.csv`` with ``dump_pseudo``).
    """
    t0 = time.perf_counter()
    if labeled.y is None:
        raise ConfigError("the first source domain must be labeled")
    if cfg.mode == "sldg" and not sources:
        raise ConfigError("sldg mode needs at least one unlabeled source domain")
    split_seed, init_seed, s1_seed, s2_seed = derive_seeds(cfg.seed, 4)
    split_rng = make_rng(split_seed)
    lab_train, lab_val = labeled.split(cfg.train_fraction, split_rng)
    src_train, src_val = zip(*(s.split(cfg.train_fraction, split_rng) for s in sources)) if sources else ((), ())
    n_classes = int(max([labeled.y.max()] + [s.y.max() for s in sources if s.y is not None]
                        + ([target.y.max()] if target is not None and target.y is not None else []))) + 1

    train_views = list(src_train) if cfg.mode == "cdg" else [s.unlabeled() for s in src_train]
    model = build_model(labeled.x.shape[1], n_classes, len(sources), make_rng(init_seed),
                        hidden_dim=cfg.hidden_dim, feat_dim=cfg.feat_dim,
                        bottleneck_dim=cfg.bottleneck_dim)

    def log_epoch(m, rec, pseudo):
        rec.acc_labeled = evaluate(m, lab_val) if lab_val.n else float("nan")
        accs = [evaluate(m, v) for v in src_val if v.y is not None and v.n]
        rec.acc_unlabeled_mean = float(np.mean(accs)) if accs else float("nan")
        rec.acc_target = evaluate(m, target) if target is not None and target.y is not None else float("nan")
        if pseudo is not None:
            pacc = [float(np.mean(p.final == t.y)) for p, t in zip(pseudo, src_train) if t.y is not None]
            rec.pseudo_acc_mean = float(np.mean(pacc)) if pacc else float("nan")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    pseudo_csv = None
    if out is not None and dump_pseudo:
        pseudo_csv = out / "pseudo_labels.csv"
        pseudo_csv.unlink(missing_ok=True)

    opt_state = {}
    metrics = RunMetrics()
    for rec in stage1(model, lab_train, cfg, make_rng(s1_seed), opt_state, log_epoch).records:
        metrics.append(rec)
    if cfg.mode != "stage1_only":
        for rec in stage2(model, lab_train, train_views, cfg, make_rng(s2_seed), opt_state, log_epoch,
                          first_epoch=cfg.m_iters + 1, pseudo_csv=pseudo_csv).records:
            metrics.append(rec)

    final = {"labeled_val": evaluate(model, lab_val) if lab_val.n else None}
    for s, v in zip(sources, src_val):
        if v.y is not None and v.n:
            final[f"source_{s.domain_id}_val"] = evaluate(model, v)
    if target is not None and target.y is not None:
        final["target"] = evaluate(model, target)
    summary = {
        "config_echo": cfg.to_json(),
        "final_accuracies": final,
        "seed": cfg.seed,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    if spec_echo is not None:
        summary["spec_echo"] = spec_echo
    if out is not None:
        metrics.write_csv(out / "metrics.csv")
        with open(out / "alpha.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "alpha"])
            for rec in metrics.records:
                w.writerow([rec.epoch, format(rec.alpha, ".10g")])
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        save_checkpoint(model, out / "model.ckpt")
    return RunResult(model, metrics, summary)
