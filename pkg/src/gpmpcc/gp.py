"""Exact Gaussian-process regression of the residual dynamics.

One independent GP with a squared-exponential kernel per output dimension
(``vx``, ``vy``, ``omega``); inputs are ``z = [x; u]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

JITTER_START = 1e-10
JITTER_MAX = 1e-4

# log-space bounds used by the hyperparameter search
SIGNAL_BOUNDS = (1e-8, 1e4)
NOISE_BOUNDS = (1e-8, 1e4)
LENGTH_BOUNDS = (1e-3, 1e4)


class GPFitError(np.linalg.LinAlgError):
    """The Gram matrix stayed indefinite after maximum jitter."""


@dataclass(frozen=True)
class SEHyper:
    """Squared-exponential hyperparameters of one output dimension.

    ``lengthscales`` are the square roots of the diagonal of ``L``, i.e.
    ``k(z, z') = signal_var * exp(-0.5 * sum(((z - z') / lengthscales)**2))``.
    """

    signal_var: float
    lengthscales: tuple[float, ...]
    noise_var: float

    def __post_init__(self):
        if not (self.signal_var > 0 and self.noise_var > 0 and all(l > 0 for l in self.lengthscales)):
            raise ValueError("hyperparameters must be strictly positive")

    def to_dict(self) -> dict:
        return {"signal_var": self.signal_var, "lengthscales": list(self.lengthscales),
                "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d: dict) -> "SEHyper":
        return cls(float(d["signal_var"]), tuple(float(v) for v in d["lengthscales"]), float(d["noise_var"]))


@dataclass(frozen=True)
class GPDataset:
    Z: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Y", Y)
        if Z.shape[0] != Y.shape[0]:
            raise ValueError("Z and Y must have the same number of rows")
        if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset entries must be finite")

    @property
    def size(self) -> int:
        return self.Z.shape[0]

    def save(self, path: str | Path) -> None:
        nz, ny = self.Z.shape[1], self.Y.shape[1]
        header = " ".join([f"z{i}" for i in range(nz)] + [f"y{i}" for i in range(ny)])
        np.savetxt(path, np.hstack([self.Z, self.Y]), header=header, fmt="%.17g")

    @classmethod
    def load(cls, path: str | Path, n_inputs: int = 8) -> "GPDataset":
        data = np.atleast_2d(np.loadtxt(path))
        return cls(data[:, :n_inputs], data[:, n_inputs:])


def kernel_se(z, z2, hyper: SEHyper) -> float:
    d = (np.asarray(z, dtype=float) - np.asarray(z2, dtype=float)) / np.asarray(hyper.lengthscales)
    return hyper.signal_var * math.exp(-0.5 * float(d @ d))


def kernel_matrix(Z1: np.ndarray, Z2: np.ndarray, hyper: SEHyper) -> np.ndarray:
    ell = np.asarray(hyper.lengthscales)
    A = Z1 / ell
    B = Z2 / ell
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_var * np.exp(-0.5 * sq)


def jittered_cholesky(K: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K``, adding jitter ``1e-10*scale`` escalating x10 up to ``1e-4*scale``."""
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    n = K.shape[0]
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(n)), jitter * scale
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPFitError("Gram matrix not positive definite after maximum jitter")


class GPModel:
    """Fitted exact GP; immutable after construction."""

    def __init__(self, dataset: GPDataset, hypers: list[SEHyper]):
        if dataset.size < 1:
            raise ValueError("dataset must contain at least one point")
        if len(hypers) != dataset.Y.shape[1]:
            raise ValueError("one hyperparameter set per output dimension is required")
        self.dataset = dataset
        self.hypers = list(hypers)
        self.n_out = len(hypers)
        self.n_in = dataset.Z.shape[1]
        self.chol: list[np.ndarray] = []
        self.alpha: list[np.ndarray] = []
        self.jitter: list[float] = []
        Z = dataset.Z
        for a, h in enumerate(self.hypers):
            K = kernel_matrix(Z, Z, h) + h.noise_var * np.eye(dataset.size)
            L, jit = jittered_cholesky(K, h.signal_var)
            self.chol.append(L)
            self.jitter.append(jit)
            self.alpha.append(cho_solve((L, True), dataset.Y[:, a]))
        self._inv_ell2 = np.array([1.0 / np.asarray(h.lengthscales) ** 2 for h in self.hypers])
        self._inv_ell = np.array([1.0 / np.asarray(h.lengthscales) for h in self.hypers])
        self._sf2 = np.array([h.signal_var for h in self.hypers])
        self._alpha = np.array(self.alpha)

    @property
    def Z(self) -> np.ndarray:
        return self.dataset.Z

    def predict(self, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Posterior mean, variance and mean gradient at one input ``z``.

        Returns:
            ``mu`` (n_out,), ``var`` (n_out,) and ``dmu/dz`` (n_out, n_in).
        """
        z = np.asarray(z, dtype=float)
        diff = z[None, :] - self.Z  # (M, n_in)
        mu = np.empty(self.n_out)
        var = np.empty(self.n_out)
        grad = np.empty((self.n_out, self.n_in))
        for a in range(self.n_out):
            sd = diff * self._inv_ell[a]
            k = self._sf2[a] * np.exp(-0.5 * np.einsum("ij,ij->i", sd, sd))
            wk = self._alpha[a] * k
            mu[a] = wk.sum()
            grad[a] = -(wk @ diff) * self._inv_ell2[a]
            v = solve_triangular(self.chol[a], k, lower=True, check_finite=False)
            var[a] = max(self._sf2[a] - v @ v, 0.0)
        return mu, var, grad

    def mean_and_grad(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        diff = z[None, :] - self.Z
        mu = np.empty(self.n_out)
        grad = np.empty((self.n_out, self.n_in))
        for a in range(self.n_out):
            sd = diff * self._inv_ell[a]
            wk = self._alpha[a] * self._sf2[a] * np.exp(-0.5 * np.einsum("ij,ij->i", sd, sd))
            mu[a] = wk.sum()
            grad[a] = -(wk @ diff) * self._inv_ell2[a]
        return mu, grad

    def mean_hessian(self, z, weights) -> np.ndarray:
        """Weighted sum ``sum_a weights[a] * d^2 mu_a / dz^2`` (n_in x n_in)."""
        z = np.asarray(z, dtype=float)
        diff = z[None, :] - self.Z
        return _weighted_mean_hessian(diff, self._alpha, self._sf2, self._inv_ell, self._inv_ell2, weights)

    def mean_expansion(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Centres, coefficients, signal variances and inverse lengthscales of the mean."""
        return self.Z, self._alpha, self._sf2, self._inv_ell

    def mean(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        diff = z[None, :] - self.Z
        out = np.empty(self.n_out)
        for a in range(self.n_out):
            sd = diff * self._inv_ell[a]
            out[a] = self._alpha[a] @ (self._sf2[a] * np.exp(-0.5 * np.einsum("ij,ij->i", sd, sd)))
        return out

    def predict_batch(self, Zq) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance at many inputs; shapes ``(n, n_out)``."""
        Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
        mu = np.empty((Zq.shape[0], self.n_out))
        var = np.empty_like(mu)
        for a, h in enumerate(self.hypers):
            Kq = kernel_matrix(Zq, self.Z, h)
            mu[:, a] = Kq @ self.alpha[a]
            V = solve_triangular(self.chol[a], Kq.T, lower=True, check_finite=False)
            var[:, a] = np.maximum(h.signal_var - np.sum(V * V, axis=0), 0.0)
        return mu, var

    def log_marginal_likelihood(self) -> float:
        """Gaussian log evidence summed over output dimensions."""
        M = self.dataset.size
        total = 0.0
        for a in range(self.n_out):
            y = self.dataset.Y[:, a]
            total += (-0.5 * y @ self.alpha[a] - np.sum(np.log(np.diag(self.chol[a])))
                      - 0.5 * M * LOG_2PI)
        return float(total)


def _weighted_mean_hessian(diff, coef, sf2, inv_ell, inv_ell2, weights) -> np.ndarray:
    """Hessian of ``sum_a w_a sum_j coef[a, j] k_a(z, z_j)`` given ``diff = z - z_j``."""
    n = diff.shape[1]
    H = np.zeros((n, n))
    for a, wa in enumerate(weights):
        if wa == 0.0:
            continue
        sd = diff * inv_ell[a]
        wk = wa * coef[a] * sf2[a] * np.exp(-0.5 * np.einsum("ij,ij->i", sd, sd))
        Dl = diff * inv_ell2[a]
        H += Dl.T @ (wk[:, None] * Dl)
        H[np.diag_indices(n)] -= wk.sum() * inv_ell2[a]
    return H


def fit(dataset: GPDataset, hypers: list[SEHyper]) -> GPModel:
    return GPModel(dataset, hypers)


def _lml_single(Z: np.ndarray, y: np.ndarray, h: SEHyper) -> float:
    K = kernel_matrix(Z, Z, h) + h.noise_var * np.eye(len(y))
    try:
        L, _ = jittered_cholesky(K, h.signal_var)
    except GPFitError:
        return -math.inf
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * LOG_2PI)


def default_hyperparameters(dataset: GPDataset) -> list[SEHyper]:
    """Data-scaled starting point: signal variance from the targets, length scales from input spreads."""
    std = dataset.Z.std(axis=0)
    ell = tuple(float(s) if s > 1e-6 else 1.0 for s in std)
    out = []
    for a in range(dataset.Y.shape[1]):
        v = float(np.var(dataset.Y[:, a]))
        v = v if v > 1e-8 else 1e-4
        out.append(SEHyper(v, ell, 0.01 * v))
    return out


def fit_hyperparameters(dataset: GPDataset, init: list[SEHyper], budget: int = 300) -> list[SEHyper]:
    """Log-space coordinate ascent on the marginal likelihood.

    Each output dimension gets ``budget`` likelihood evaluations. Only
    improving moves are accepted, so the evidence never decreases; when the
    budget runs out the best point found so far is returned.
    """
    out = []
    for a, h0 in enumerate(init):
        y = dataset.Y[:, a]
        theta = np.log(np.concatenate([[h0.signal_var], h0.lengthscales, [h0.noise_var]]))
        lo = np.log([SIGNAL_BOUNDS[0]] + [LENGTH_BOUNDS[0]] * len(h0.lengthscales) + [NOISE_BOUNDS[0]])
        hi = np.log([SIGNAL_BOUNDS[1]] + [LENGTH_BOUNDS[1]] * len(h0.lengthscales) + [NOISE_BOUNDS[1]])
        theta = np.clip(theta, lo, hi)

        def unpack(t):
            return SEHyper(float(math.exp(t[0])), tuple(float(v) for v in np.exp(t[1:-1])), float(math.exp(t[-1])))

        best = _lml_single(dataset.Z, y, unpack(theta))
        evals = 1
        step = 1.0
        while evals < budget and step > 1e-3:
            improved = False
            for i in range(theta.size):
                for sign in (1.0, -1.0):
                    if evals >= budget:
                        break
                    trial = theta.copy()
                    trial[i] = min(max(trial[i] + sign * step, lo[i]), hi[i])
                    if trial[i] == theta[i]:
                        continue
                    value = _lml_single(dataset.Z, y, unpack(trial))
                    evals += 1
                    if value > best:
                        best, theta = value, trial
                        improved = True
                        break
            if not improved:
                step *= 0.5
        logger.debug("output %d: log evidence %.4f after %d evaluations", a, best, evals)
        out.append(unpack(theta))
    return out


def with_noise(hypers: list[SEHyper], noise_var) -> list[SEHyper]:
    return [replace(h, noise_var=float(n)) for h, n in zip(hypers, noise_var)]
