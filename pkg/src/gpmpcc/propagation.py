"""Gaussian moment propagation, precomputed variance tube and constraint tightening."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vehicle import BD, NV, NX, VehicleParams, discrete_jacobians, discrete_step


class ZeroResidual:
    """Residual model that predicts nothing: the nominal (or true) model is used as is."""

    n_out = NV

    def __init__(self, n_in: int = 8):
        self.n_in = n_in

    def predict(self, z):
        return np.zeros(NV), np.zeros(NV), np.zeros((NV, self.n_in))

    def mean_and_grad(self, z):
        return np.zeros(NV), np.zeros((NV, self.n_in))

    def mean(self, z):
        return np.zeros(NV)

    def mean_hessian(self, z, weights):
        return np.zeros((self.n_in, self.n_in))

    def mean_expansion(self):
        return np.zeros((0, self.n_in)), np.zeros((NV, 0)), np.ones(NV), np.ones((NV, self.n_in))

    def predict_batch(self, Zq):
        n = np.atleast_2d(Zq).shape[0]
        return np.zeros((n, NV)), np.zeros((n, NV))


def _z(x, u) -> np.ndarray:
    return np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])


def psd_clamp(S: np.ndarray) -> np.ndarray:
    """Symmetrize and floor eigenvalues at zero."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= 0.0:
        return S
    return (V * np.maximum(w, 0.0)) @ V.T


def linearized_covariance(A: np.ndarray, Sigma: np.ndarray, Bd: np.ndarray, Sigma_d: np.ndarray) -> np.ndarray:
    """First-order covariance update ``A Sigma A^T + Bd Sigma_d Bd^T``, PSD-clamped."""
    return psd_clamp(A @ Sigma @ A.T + Bd @ Sigma_d @ Bd.T)


def propagate_mean(mu_x, u, gp, params: VehicleParams) -> np.ndarray:
    """Mean update ``f(mu, u) + B_d mu_d(mu, u)``."""
    return discrete_step(mu_x, u, params) + BD @ gp.mean(_z(mu_x, u))


def propagate_variance(mu_x, u, Sigma_x, gp, params: VehicleParams, sigma_w=None) -> np.ndarray:
    """Covariance update by first-order expansion of the learned dynamics.

    The mean map ``f + B_d mu_d`` is linearized at ``mu_x``; the GP variance
    and the process noise enter additively on the velocity states.
    """
    _, A, _ = discrete_jacobians(mu_x, u, params)
    _, var_d, grad_d = gp.predict(_z(mu_x, u))
    A_tot = A + BD @ grad_d[:, :NX]
    Sd = np.diag(var_d)
    if sigma_w is not None:
        Sd = Sd + np.diag(np.asarray(sigma_w, dtype=float))
    return linearized_covariance(A_tot, np.asarray(Sigma_x, dtype=float), BD, Sd)


def lambda_max_2x2(S: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric 2x2 matrix from trace and determinant."""
    a, b, d = float(S[0, 0]), 0.5 * float(S[0, 1] + S[1, 0]), float(S[1, 1])
    half_tr = 0.5 * (a + d)
    disc = math.sqrt(max(0.25 * (a - d) ** 2 + b * b, 0.0))
    return max(half_tr + disc, 0.0)


def tighten_radius(r: float, Sigma_xy, chi2_level: float, r_min_frac: float = 0.1) -> tuple[float, float]:
    """Margin ``sqrt(chi2 * lambda_max)`` and the tightened radius, floored at ``r_min_frac * r``."""
    if chi2_level < 0:
        raise ValueError("chi2_level must be non-negative")
    margin = math.sqrt(chi2_level * lambda_max_2x2(np.asarray(Sigma_xy)))
    return margin, max(r - margin, r_min_frac * r)


@dataclass(frozen=True)
class VarianceTube:
    """State covariances ``Sigma_0..Sigma_N`` along an approximate trajectory.

    ``margins[i]`` and ``radii[i]`` apply to the state at prediction step ``i``.
    """

    covs: np.ndarray
    margins: np.ndarray
    radii: np.ndarray

    @property
    def horizon(self) -> int:
        return self.covs.shape[0] - 1

    @property
    def cov_xy(self) -> np.ndarray:
        return self.covs[:, :2, :2]

    @classmethod
    def zero(cls, N: int, r: float) -> "VarianceTube":
        return cls(np.zeros((N + 1, NX, NX)), np.zeros(N + 1), np.full(N + 1, r))

    def to_dict(self) -> dict:
        return {"cov_xy": self.cov_xy.tolist(), "margins": self.margins.tolist(), "radii": self.radii.tolist()}


def build_variance_tube(traj_x, traj_u, gp, params: VehicleParams, sigma_w, r: float,
                        chi2_level: float, n_tight: int, r_min_frac: float = 0.1) -> VarianceTube:
    """Variance recursion along a fixed trajectory ``(x_i, u_i)``, ``i = 0..N-1``.

    ``Sigma_0 = 0``; steps ``1..n_tight`` get a tightening margin, later steps none.
    ``sigma_w`` may be ``None`` to leave process noise out of the recursion.
    """
    traj_x = np.atleast_2d(np.asarray(traj_x, dtype=float))
    traj_u = np.atleast_2d(np.asarray(traj_u, dtype=float))
    N = traj_x.shape[0]
    if traj_u.shape[0] != N:
        raise ValueError("state and input trajectories must have equal length")
    covs = np.zeros((N + 1, NX, NX))
    margins = np.zeros(N + 1)
    radii = np.full(N + 1, float(r))
    for i in range(N):
        covs[i + 1] = propagate_variance(traj_x[i], traj_u[i], covs[i], gp, params, sigma_w)
        if i + 1 <= n_tight:
            margins[i + 1], radii[i + 1] = tighten_radius(r, covs[i + 1, :2, :2], chi2_level, r_min_frac)
    return VarianceTube(covs, margins, radii)


def shift_trajectory(states: np.ndarray, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-step shift of a horizon solution, duplicating the last point.

    ``states`` has ``N + 1`` rows, ``inputs`` ``N`` rows; the result has ``N`` rows each.
    """
    xs = np.vstack([states[1:], states[-1:]])[: inputs.shape[0]]
    us = np.vstack([inputs[1:], inputs[-1:]])
    return xs, us


def braking_rollout(x0, params: VehicleParams, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Cold-start trajectory: coast with zero throttle and straight wheels.

    Returns ``N + 1`` states and ``N`` inputs.
    """
    xs = np.zeros((N + 1, NX))
    us = np.zeros((N, 2))
    xs[0] = x0
    for i in range(N):
        xs[i + 1] = discrete_step(xs[i], us[i], params)
    return xs, us
