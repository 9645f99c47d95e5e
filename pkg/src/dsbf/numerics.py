"""Dense numeric primitives shared by every other module.

Matrices are plain ``float64`` numpy arrays. All randomness goes through
:func:`make_rng`, which wraps numpy's PCG64 bit generator; no module touches
numpy's global random state.
"""
from __future__ import annotations

import warnings

import numpy as np

LOG_CLAMP = 1e-12


class DimensionError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a system cannot be solved even after ridge jitter."""

    def __init__(self, message: str, smallest_pivot: float, index: int):
        super().__init__(f"{message} (smallest pivot {smallest_pivot:.6g} at index {index})")
        self.smallest_pivot = smallest_pivot
        self.index = index


class NumericalError(FloatingPointError):
    """Raised when a non-finite value shows up where it must not."""


class DegenerateFeatureWarning(RuntimeWarning):
    """Emitted when a zero-norm vector enters a cosine distance."""


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Return a PCG64-backed generator; identical seeds give identical streams."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seed sequences for per-domain / per-repetition streams."""
    return np.random.SeedSequence(int(seed)).spawn(count)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Raises
    ------
    DimensionError
        If the matrix has no rows or no columns.
    """
    m = as_matrix(m)
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionError(f"softmax_rows needs a non-empty matrix, got shape {m.shape}")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_CLAMP))


def clamped_log_grad(p: np.ndarray) -> np.ndarray:
    """Derivative of ``clamped_log``; zero wherever the clamp is active."""
    return np.where(p > LOG_CLAMP, 1.0 / np.maximum(p, LOG_CLAMP), 0.0)


def cosine_distance(u, v) -> float:
    """``1 - u.v / (|u| |v|)``; a zero-norm input gives 1.0 and a warning."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch {u.shape[0]} vs {v.shape[0]}")
    nu = np.sqrt(np.sum(u * u))
    nv = np.sqrt(np.sum(v * v))
    if nu == 0.0 or nv == 0.0:
        warnings.warn("zero-norm vector in cosine distance; returning 1.0",
                      DegenerateFeatureWarning, stacklevel=2)
        return 1.0
    return float(1.0 - np.sum(u * v) / (nu * nv))


def cholesky_pivots(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain Cholesky returning the lower factor and the squared pivots.

    Stops at the first non-positive pivot; the returned pivot array then
    ends with that value.
    """
    n = a.shape[0]
    low = np.zeros_like(a)
    pivots = np.empty(n)
    for k in range(n):
        d = a[k, k] - np.dot(low[k, :k], low[k, :k])
        pivots[k] = d
        if not np.isfinite(d) or d <= 0.0:
            return low, pivots[: k + 1]
        low[k, k] = np.sqrt(d)
        if k + 1 < n:
            low[k + 1:, k] = (a[k + 1:, k] - low[k + 1:, :k] @ low[k, :k]) / low[k, k]
    return low, pivots


def solve_spd(a, b, *, return_info: bool = False):
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    A ridge of ``1e-10 * trace(a) / dim`` is added to the diagonal before
    factorization, followed by one step of iterative refinement against the
    original matrix. A pivot that is non-positive, or smaller than twice the
    ridge (the matrix itself contributes nothing in that direction), raises
    :class:`SingularMatrixError`.

    Parameters
    ----------
    a : array_like, shape (d, d)
    b : array_like, shape (d,) or (d, k)
    return_info : bool
        Also return a dict with ``jitter``, ``min_pivot`` and ``ill_conditioned``.
    """
    a = as_matrix(a, "a")
    b_arr = np.asarray(b, dtype=np.float64)
    vector_rhs = b_arr.ndim == 1
    b2 = b_arr[:, None] if vector_rhs else b_arr
    d = a.shape[0]
    if a.shape != (d, d):
        raise DimensionError(f"a must be square, got {a.shape}")
    if b2.ndim != 2 or b2.shape[0] != d:
        raise DimensionError(f"b has shape {b_arr.shape}, expected leading dim {d}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise DimensionError("a is not symmetric within 1e-10")

    trace = float(np.trace(a))
    jitter = 1e-10 * trace / d if trace > 0 else 0.0
    low, pivots = cholesky_pivots(a + jitter * np.eye(d))
    k = int(np.argmin(pivots))
    if len(pivots) < d or pivots[k] <= 0.0:
        raise SingularMatrixError("matrix is not positive definite after jitter",
                                  float(pivots[-1]), len(pivots) - 1)
    if pivots[k] < 2.0 * jitter:
        raise SingularMatrixError("matrix is numerically rank deficient",
                                  float(pivots[k]), k)

    x = _back_sub(low.T, _forward_sub(low, b2))
    # one refinement step against the unjittered matrix removes the ridge bias
    # to first order (contraction factor jitter / (eigenvalue + jitter) < 1)
    if jitter > 0.0:
        x = x + _back_sub(low.T, _forward_sub(low, b2 - a @ x))
    if vector_rhs:
        x = x[:, 0]
    if return_info:
        info = {
            "jitter": jitter,
            "min_pivot": float(pivots[k]),
            "ill_conditioned": bool(pivots[k] < 1e-8 * trace / d),
        }
        return x, info
    return x


def _forward_sub(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.zeros_like(b)
    for i in range(low.shape[0]):
        y[i] = (b[i] - low[i, :i] @ y[:i]) / low[i, i]
    return y


def _back_sub(up: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = up.shape[0]
    x = np.zeros_like(y)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - up[i, i + 1:] @ x[i + 1:]) / up[i, i]
    return x
