"""Rank-1 modifications of lower Cholesky factors ``A = L L^T``."""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular


class DowndateError(np.linalg.LinAlgError):
    """A downdate would make the factored matrix indefinite."""


@njit(cache=True)
def _update_many(L, X, signs, rel_tol):
    """Apply ``A += sign_k * x_k x_k^T`` for every row of ``X`` in place.

    Returns the index of the first failing update, or -1.
    """
    n = L.shape[0]
    x = np.empty(n)
    for u in range(X.shape[0]):
        sign = signs[u]
        for i in range(n):
            x[i] = X[u, i]
        for k in range(n):
            d = L[k, k]
            r2 = d * d + sign * x[k] * x[k]
            if r2 <= rel_tol * d * d:
                return u
            r = np.sqrt(r2)
            c = r / d
            s = x[k] / d
            L[k, k] = r
            for i in range(k + 1, n):
                L[i, k] = (L[i, k] + sign * s * x[i]) / c
                x[i] = c * x[i] - s * L[i, k]
    return -1


def chol_update(L: np.ndarray, x: np.ndarray, sign: float = 1.0, rel_tol: float = 1e-12) -> np.ndarray:
    """Factor of ``L L^T + sign * x x^T``; raises :class:`DowndateError` on loss of definiteness."""
    return chol_update_many(L, np.atleast_2d(x), np.full(1, float(sign)), rel_tol)


def chol_update_many(L: np.ndarray, X: np.ndarray, signs: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    out = np.array(L, dtype=float, order="C", copy=True)
    X = np.ascontiguousarray(X, dtype=float)
    failed = _update_many(out, X, np.ascontiguousarray(signs, dtype=float), rel_tol)
    if failed >= 0:
        raise DowndateError(f"rank-1 downdate {failed} lost positive definiteness")
    return out


def chol_delete(L: np.ndarray, k: int) -> np.ndarray:
    """Factor of ``A`` with row and column ``k`` removed."""
    n = L.shape[0]
    keep = [i for i in range(n) if i != k]
    out = L[np.ix_(keep, keep)].copy()
    if k < n - 1:
        tail = L[k + 1:, k]
        out[k:, k:] = chol_update(out[k:, k:], tail, 1.0)
    return out


def chol_append(L: np.ndarray, col: np.ndarray, diag: float) -> np.ndarray:
    """Factor of ``[[A, col], [col^T, diag]]``."""
    n = L.shape[0]
    ell = solve_triangular(L, col, lower=True, check_finite=False) if n else np.zeros(0)
    d2 = diag - ell @ ell
    if not d2 > 0:
        raise DowndateError("appended matrix is not positive definite")
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = L
    out[n, :n] = ell
    out[n, n] = np.sqrt(d2)
    return out
