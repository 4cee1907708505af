"""Dense linear algebra shared by the surrogate fitter and model training.

Everything here is 64-bit: comparison of scores across models happens at the
fourth decimal place and below, which float32 accumulation would endanger.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .rng import SeededRng


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array and reject non-finite entries."""
    a = np.ascontiguousarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    assert_finite(a, name)
    return a


def as_vector(values, name: str = "vector") -> np.ndarray:
    a = np.ascontiguousarray(values, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    assert_finite(a, name)
    return a


def assert_finite(a: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose rows are bitwise independent of the batch size.

    BLAS GEMM picks kernels based on the number of rows, so slicing a batch
    changes low-order bits of the result. einsum without contraction
    optimization accumulates in a fixed order per output element, which keeps
    predictions identical whether a batch is evaluated whole or in chunks
    (the service-transparency guarantee). Roughly 3x slower than GEMM; used
    only on the prediction path.
    """
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def argmax_row(row) -> int:
    """Index of the row maximum; ties break toward the lowest index."""
    a = np.asarray(row, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("argmax_row expects a nonempty 1-D vector")
    return int(np.argmax(a))


def sample_gaussian(rng: SeededRng, n: int, d: int, mean: float = 0.0,
                    stddev: float = 1.0) -> np.ndarray:
    """n-by-d matrix of i.i.d. normal samples, deterministic in the rng seed."""
    if stddev < 0:
        raise ValueError(f"stddev must be nonnegative, got {stddev}")
    return mean + stddev * rng.standard_normal((int(n), int(d)))


def solve_ridge(design, targets, sample_weights=None, ridge_lambda: float = 0.0):
    """Weighted least squares with an L2 penalty on the slopes only.

    Minimizes sum_j s_j * (w . z_j + b - t_j)^2 + ridge_lambda * ||w||_2^2
    over (w, b). The intercept is fitted through a column of ones and never
    regularized, so a constant target is reproduced exactly for any lambda.
    Solved through the weighted normal equations with a Cholesky
    factorization; a singular system falls back to the pseudo-inverse, which
    selects the minimum-norm solution.

    Returns (weights, intercept).
    """
    Z = as_matrix(design, "design")
    t = as_vector(targets, "targets")
    k, d = Z.shape
    if sample_weights is None:
        s = np.ones(k)
    else:
        s = as_vector(sample_weights, "sample_weights")
    if t.shape[0] != k or s.shape[0] != k:
        raise ValueError(
            f"design has {k} rows but targets has {t.shape[0]} "
            f"and sample_weights has {s.shape[0]}"
        )
    if ridge_lambda < 0:
        raise ValueError(f"ridge_lambda must be nonnegative, got {ridge_lambda}")
    if np.any(s < 0):
        raise ValueError("sample_weights must be nonnegative")
    if not np.any(s > 0):
        raise ValueError("sample_weights must not be all zero")

    A = np.hstack([Z, np.ones((k, 1))])
    Aw = A * s[:, None]
    G = A.T @ Aw
    if ridge_lambda > 0:
        G[np.arange(d), np.arange(d)] += ridge_lambda
    rhs = Aw.T @ t

    try:
        factor = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
        sol = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        sol = np.linalg.pinv(G) @ rhs

    assert_finite(sol, "ridge solution")
    return sol[:d].copy(), float(sol[d])
