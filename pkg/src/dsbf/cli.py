"""Command-line entry point.

Every command takes ``--spec`` (a flat JSON object), ``--out``, ``--seed``
and ``--quiet``. Exit codes: 0 success, 1 configuration error, 2 numerical
failure, 3 I/O error. Relative output paths resolve against
``$DSBF_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import csv
import json
import os
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path

import click
import numpy as np

from .data import read_csv, write_csv
from .datagen import StructuralSpec, ToyDomainSpec, dump_spec, gen_toy_domains
from .gradcheck import LOSS_NAMES, TOLERANCE, gradient_suite
from .networks import SgdConfig
from .numerics import DegenerateFeatureWarning, NumericalError, SingularMatrixError
from .theory import consistency_sweep, write_rate_report
from .trainer import ConfigError, TrainConfig, run_experiment

OUTPUT_ROOT_ENV = "DSBF_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

TOY_KEYS = {f.name for f in fields(ToyDomainSpec)}
STRUCT_KEYS = {f.name for f in fields(StructuralSpec)}
SGD_KEYS = {f.name for f in fields(SgdConfig)}
TRAIN_KEYS = (TrainConfig.field_names() - {"sgd", "lam"}) | SGD_KEYS | {"lambda"}
EXTRA_KEYS = {
    "seed", "out", "data", "labeled", "unlabeled", "target", "dump_pseudo",
    "n_grid", "reps", "slope_band", "se_limit", "naive_factor",
    "lambda_grid", "gamma_grid", "n_seeds", "h",
}
KNOWN_KEYS = TOY_KEYS | STRUCT_KEYS | TRAIN_KEYS | EXTRA_KEYS
SWEEP_GRID = [0.1, 0.5, 1.0, 2.0]


def fmt(v) -> str:
    return format(v, ".6g") if isinstance(v, float) else str(v)


class Context:
    def __init__(self, spec_path, out, seed, quiet):
        self.raw = {}
        self.base = Path.cwd()
        if spec_path is not None:
            path = Path(spec_path)
            with open(path) as fh:
                try:
                    self.raw = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
            if not isinstance(self.raw, dict):
                raise ConfigError(f"{path}: spec must be a JSON object")
            unknown = sorted(set(self.raw) - KNOWN_KEYS)
            if unknown:
                raise ConfigError(f"{path}: unknown key(s): {', '.join(unknown)}")
            self.base = path.resolve().parent
        self.out_flag = out
        self.seed = int(seed) if seed is not None else int(self.raw.get("seed", 0))
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.quiet = quiet

    def echo(self, msg: str = "") -> None:
        if not self.quiet:
            click.echo(msg)

    def pick(self, keys) -> dict:
        return {k: self.raw[k] for k in keys if k in self.raw}

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def out_dir(self, default: str) -> Path:
        if self.out_flag is not None:
            p, base = Path(self.out_flag), Path.cwd()
        elif "out" in self.raw:
            p, base = Path(self.raw["out"]), self.base
        else:
            p, base = Path(default), Path.cwd()
        if p.is_absolute():
            return p
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return (Path(root) if root else base) / p

    def toy_spec(self) -> ToyDomainSpec:
        return ToyDomainSpec(**self.pick(TOY_KEYS))

    def struct_spec(self) -> StructuralSpec:
        return StructuralSpec(**self.pick(STRUCT_KEYS))

    def train_config(self) -> TrainConfig:
        kw = self.pick(TrainConfig.field_names() - {"sgd", "lam"})
        if "lambda" in self.raw:
            kw["lam"] = self.raw["lambda"]
        kw["sgd"] = SgdConfig(**self.pick(SGD_KEYS))
        kw["seed"] = self.seed
        return TrainConfig(**kw)


def common(fn):
    fn = click.option("--quiet", is_flag=True, help="Suppress standard output.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
                      help="Overrides the spec's seed.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory.")(fn)
    fn = click.option("--spec", type=click.Path(dir_okay=False), default=None,
                      help="Flat JSON configuration file.")(fn)
    return fn


@click.group()
def cli():
    """Bias-filtering training and estimator checks on synthetic domains."""


@cli.command()
@common
def gen(spec, out, seed, quiet):
    """Generate toy domains as one CSV per domain plus a JSON spec echo."""
    ctx = Context(spec, out, seed, quiet)
    toy = ctx.toy_spec()
    dest = ctx.out_dir("data")
    dest.mkdir(parents=True, exist_ok=True)
    for ds in gen_toy_domains(toy, ctx.seed):
        write_csv(dest / f"domain_{ds.domain_id}.csv", [ds])
    dump_spec(toy, dest / "toy_spec.json")
    ctx.echo(f"wrote {len(toy.domains)} domains to {dest}")
    return EXIT_OK


def _load_domains(ctx: Context) -> list:
    if "data" not in ctx.raw:
        return gen_toy_domains(ctx.toy_spec(), ctx.seed)
    paths = ctx.raw["data"]
    paths = [paths] if isinstance(paths, str) else paths
    domains = [d for p in paths for d in read_csv(ctx.path(p))]
    ids = [d.domain_id for d in domains]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids across data files: {sorted(ids)}")
    return sorted(domains, key=lambda d: d.domain_id)


def _roles(ctx: Context, domains: list):
    by_id = {d.domain_id: d for d in domains}
    ids = sorted(by_id)
    labeled = ctx.raw.get("labeled", ids[0])
    target = ctx.raw.get("target", ids[-1] if len(ids) > 1 else None)
    unlabeled = ctx.raw.get("unlabeled", [i for i in ids if i not in (labeled, target)])
    for i in [labeled, target, *unlabeled]:
        if i is not None and i not in by_id:
            raise ConfigError(f"no domain with id {i}")
    if labeled == target or labeled in unlabeled or (target is not None and target in unlabeled):
        raise ConfigError("labeled, unlabeled and target roles must not overlap")
    return by_id[labeled], [by_id[i] for i in unlabeled], None if target is None else by_id[target]


def _train(ctx: Context, cfg: TrainConfig, out: Path | None):
    labeled, sources, target = _roles(ctx, _load_domains(ctx))
    res = run_experiment(labeled, sources, target, cfg, out,
                         dump_pseudo=bool(ctx.raw.get("dump_pseudo", False)), spec_echo=ctx.raw)
    return res, labeled, sources, target


@cli.command()
@common
def train(spec, out, seed, quiet):
    """Train in the configured mode and print final accuracies."""
    ctx = Context(spec, out, seed, quiet)
    cfg = ctx.train_config()
    res, labeled, sources, target = _train(ctx, cfg, ctx.out_dir("run"))
    acc = res.summary["final_accuracies"]
    ctx.echo(f"mode {cfg.mode}  seed {cfg.seed}")
    ctx.echo(f"{'domain':<8}{'role':<11}accuracy")
    ctx.echo(f"{labeled.domain_id:<8}{'labeled':<11}{fmt(acc['labeled_val'])}")
    for s in sources:
        key = f"source_{s.domain_id}_val"
        ctx.echo(f"{s.domain_id:<8}{'unlabeled' if cfg.mode == 'sldg' else 'source':<11}"
                 f"{fmt(acc[key]) if key in acc else 'n/a'}")
    if target is not None:
        ctx.echo(f"{target.domain_id:<8}{'target':<11}{fmt(acc.get('target', 'n/a'))}")
    return EXIT_OK


@cli.command()
@common
def theory(spec, out, seed, quiet):
    """Monte Carlo consistency check of the two-stage estimator."""
    ctx = Context(spec, out, seed, quiet)
    sspec = ctx.struct_spec()
    report = consistency_sweep(
        sspec, list(ctx.raw.get("n_grid", [200, 800, 3200, 12800])),
        int(ctx.raw.get("reps", 200)), ctx.seed,
        labeled=int(ctx.raw.get("labeled", 0)),
        unlabeled=tuple(ctx.raw.get("unlabeled", [1])),
        slope_band=tuple(ctx.raw.get("slope_band", (-0.65, -0.35))),
        se_limit=float(ctx.raw.get("se_limit", 4.0)),
        naive_factor=float(ctx.raw.get("naive_factor", 3.0)))
    dest = ctx.out_dir("theory")
    dest.mkdir(parents=True, exist_ok=True)
    write_rate_report(report, dest / "rate.csv", dest / "rate.json")
    ctx.echo(f"{'n':>7}  {'mean_error':>12}  {'se_error':>12}  {'naive_error':>12}")
    for n, e, s, ne in zip(report.n_grid, report.mean_error, report.se_error, report.naive_mean_error):
        ctx.echo(f"{n:>7}  {fmt(e):>12}  {fmt(s):>12}  {fmt(ne):>12}")
    ctx.echo(f"slope {fmt(report.slope)}")
    f = report.flags
    ctx.echo(f"slope_in_band {'PASS' if f['slope_in_band'] else 'FAIL'}")
    ctx.echo(f"unbiased_within_se {'PASS' if f['unbiased_within_se'] else 'FAIL'}")
    ctx.echo(f"naive_factor {fmt(float(f['naive_factor']))} {'PASS' if f['naive_factor_ok'] else 'FAIL'}")
    return EXIT_OK


@cli.command()
@common
@click.option("--n-seeds", type=click.IntRange(1), default=None, help="Number of seeds (default 20).")
@click.option("--inject-fault", type=click.Choice(LOSS_NAMES), default=None, hidden=True)
def gradcheck(spec, out, seed, quiet, n_seeds, inject_fault):
    """Central-difference check of every loss gradient."""
    ctx = Context(spec, out, seed, quiet)
    n_seeds = n_seeds or int(ctx.raw.get("n_seeds", 20))
    worst = gradient_suite(range(ctx.seed, ctx.seed + n_seeds), float(ctx.raw.get("h", 1e-5)),
                           fault=inject_fault)
    ok = True
    for name in LOSS_NAMES:
        passed = worst[name] <= TOLERANCE
        ok &= passed
        ctx.echo(f"{name:<4}{fmt(worst[name]):>14}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


@cli.command()
@common
def sweep(spec, out, seed, quiet):
    """Lambda/gamma sensitivity grid on the training task."""
    ctx = Context(spec, out, seed, quiet)
    base = ctx.train_config()
    lams = [float(v) for v in ctx.raw.get("lambda_grid", SWEEP_GRID)]
    gammas = [float(v) for v in ctx.raw.get("gamma_grid", SWEEP_GRID)]
    dest = ctx.out_dir("sweep")
    dest.mkdir(parents=True, exist_ok=True)
    rows, failed = [], 0
    for lam in lams:
        for gamma in gammas:
            try:
                res = _train(ctx, replace(base, lam=lam, gamma=gamma), None)[0]
                acc, code = res.summary["final_accuracies"], EXIT_OK
            except (NumericalError, SingularMatrixError, FloatingPointError):
                acc, code = {}, EXIT_NUMERICAL
                failed += 1
            src = [v for k, v in acc.items() if k.startswith("source_")]
            rows.append([lam, gamma, code, acc.get("target", float("nan")),
                         acc.get("labeled_val", float("nan")),
                         float(np.mean(src)) if src else float("nan")])
            ctx.echo(f"lambda {fmt(lam)}  gamma {fmt(gamma)}  exit {code}  "
                     f"target {fmt(rows[-1][3])}")
    with open(dest / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "gamma", "exit_code", "acc_target", "acc_labeled", "acc_unlabeled_mean"])
        for r in rows:
            w.writerow([fmt(r[0]), fmt(r[1]), r[2]] + [format(v, ".10g") for v in r[3:]])
    return EXIT_NUMERICAL if failed else EXIT_OK


def _report_warnings(caught) -> None:
    """One stderr line per distinct warning; degenerate-feature warnings are counted."""
    seen, degenerate = [], 0
    for w in caught:
        if issubclass(w.category, DegenerateFeatureWarning):
            degenerate += 1
        elif str(w.message) not in seen:
            seen.append(str(w.message))
    for msg in seen:
        click.echo(f"warning: {msg}", err=True)
    if degenerate:
        click.echo(f"warning: zero-norm feature vectors met in {degenerate} cosine assignments",
                   err=True)


def main(argv=None) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            return _dispatch(argv)
        finally:
            _report_warnings(caught)


def _dispatch(argv) -> int:
    try:
        rv = cli.main(args=argv, prog_name="dsbf", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except (NumericalError, SingularMatrixError, FloatingPointError) as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return EXIT_NUMERICAL
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
