"""Compare the compiled and numpy clustering kernels.

Usage: python bench/bench_kernels.py [--n N] [--dim D] [--classes C] [--repeat R]

Reports the best-of-R wall time per kernel and backend, and checks that both
backends return the same labels.
"""
import argparse
import sys
import timeit

import numpy as np

from dsbf import kernels


def make_inputs(n, dim, classes, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, dim))
    cents = rng.normal(size=(classes, dim))
    logits = rng.normal(size=(n, classes))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, classes, n)
    return feats, cents, probs, labels


def bench(backend, feats, cents, probs, labels, repeat):
    classes = cents.shape[0]
    mean = feats.mean(axis=0)
    calls = {
        "cosine_assign": lambda: backend.cosine_assign(feats, cents),
        "hard_centroids": lambda: backend.hard_centroids(feats, labels, classes, cents),
        "soft_centroids": lambda: backend.soft_centroids(feats, probs, mean),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in calls.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if kernels.compiled_backend is None:
        print("compiled backend not available; build with `pip install -e . --no-build-isolation`")
        return 1
    feats, cents, probs, labels = make_inputs(args.n, args.dim, args.classes)
    py = bench(kernels.python_backend, feats, cents, probs, labels, args.repeat)
    cy = bench(kernels.compiled_backend, feats, cents, probs, labels, args.repeat)

    same = np.array_equal(kernels.python_backend.cosine_assign(feats, cents)[0],
                          kernels.compiled_backend.cosine_assign(feats, cents)[0])
    print(f"n={args.n} dim={args.dim} classes={args.classes} repeat={args.repeat}")
    print(f"{'kernel':<16}{'python_ms':>12}{'cython_ms':>12}{'speedup':>10}")
    for name in py:
        print(f"{name:<16}{py[name] * 1e3:>12.3f}{cy[name] * 1e3:>12.3f}{py[name] / cy[name]:>10.2f}")
    print(f"labels identical: {same}")
    return 0 if same else 2


if __name__ == "__main__":
    sys.exit(main())
