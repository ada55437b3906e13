"""Horizon rollout, input sensitivities and curvature on top of the compiled kernels.

The residual model enters through its SE-kernel mean expansion
``mu_a(z) = sum_j coef[a, j] * sf2[a] * exp(-0.5 * ||(z - Z_j) * inv_ell[a]||^2)``,
which covers the exact GP, the sparse GP and the zero residual (no centres).
"""

from __future__ import annotations

import numpy as np

from ._kernels import NU, NV, NX, NZ, _rollout, _rollout_sens, _second_order
from .vehicle import ModelEvaluationError


def model_expansion(model) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(Z, coef, sf2, inv_ell)`` as contiguous float arrays for the kernels."""
    Z, coef, sf2, inv_ell = model.mean_expansion()
    return (np.ascontiguousarray(Z, dtype=float).reshape(-1, NZ),
            np.ascontiguousarray(coef, dtype=float).reshape(NV, -1),
            np.ascontiguousarray(sf2, dtype=float),
            np.ascontiguousarray(inv_ell, dtype=float))


def rollout(x0, U, prm, expansion) -> np.ndarray:
    xs = np.empty((U.shape[0] + 1, NX))
    if not _rollout(np.asarray(x0, dtype=float), np.ascontiguousarray(U), prm, *expansion, xs):
        raise ModelEvaluationError("f", float("nan"))
    return xs


def rollout_sens(x0, U, prm, expansion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """States ``(N+1, 6)``, sensitivities ``(N+1, 6, 2N)`` and step Jacobians ``(N, 6, 6)``."""
    N = U.shape[0]
    xs = np.empty((N + 1, NX))
    S = np.empty((N + 1, NX, NU * N))
    As = np.empty((N, NX, NX))
    if not _rollout_sens(np.asarray(x0, dtype=float), np.ascontiguousarray(U), prm, *expansion, xs, S, As):
        raise ModelEvaluationError("f", float("nan"))
    return xs, S, As


def second_order(xs, U, S, As, pos_weights, prm, expansion, step: float = 1e-5) -> np.ndarray:
    """Curvature of ``sum_i pos_weights[i]' (X_i, Y_i)`` w.r.t. the inputs (symmetric)."""
    N = U.shape[0]
    H = np.zeros((NU * N, NU * N))
    if not _second_order(xs, np.ascontiguousarray(U), S, As, np.ascontiguousarray(pos_weights), prm,
                         *expansion, step, H):
        raise ModelEvaluationError("f", float("nan"))
    return 0.5 * (H + H.T)
