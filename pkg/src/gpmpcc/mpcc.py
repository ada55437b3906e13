"""Horizon-N contouring optimal control problem in single-shooting form.

Decision vector layout (``n = 4N``)::

    w = [p_0, delta_0, ..., p_{N-1}, delta_{N-1},  v_0..v_{N-1},  s_1..s_N]

States are eliminated by forward simulation of the mean dynamics
``x_{i+1} = f(x_i, u_i) + B_d mu_d(x_i, u_i)``. The contouring and lag errors
are affine in ``(X_i, Y_i, Theta_i)`` around a frozen linearization point,
so the cost is a sum of squares of smooth residuals plus linear terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import horizon
from .propagation import VarianceTube
from .track import Track
from .vehicle import NU, NX, VehicleParams


class OCPBuildError(ValueError):
    """Inconsistent horizon data handed to :func:`build_ocp`."""


@dataclass(frozen=True)
class MPCCConfig:
    """Weights and limits of the contouring controller.

    Args:
        N: Horizon length.
        q_c, q_l: Contouring and lag error weights.
        gamma: Progress reward.
        r_u: Diagonal of the input-rate weight ``R_u``.
        r_v: Progress-rate weight.
        q_s, c_s: Quadratic and linear slack penalties.
        n_tight: Number of leading prediction steps with tightened bounds.
        chi2_level: Chi-squared quantile used for tightening.
        v_max_step: Upper bound of the progress increment per step [m].
        second_order: Add the PSD part of the dynamics curvature to the
            Gauss-Newton Hessian.
    """

    N: int = 30
    q_c: float = 0.3
    q_l: float = 200.0
    gamma: float = 4.0
    r_u: tuple[float, float] = (0.01, 5.0)
    r_v: float = 20.0
    q_s: float = 1000.0
    c_s: float = 100.0
    n_tight: int = 15
    chi2_level: float = 1.0
    v_max_step: float = 0.12
    second_order: bool = True

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        weights = [self.q_c, self.q_l, self.gamma, *self.r_u, self.r_v, self.q_s, self.chi2_level]
        if min(weights) < 0:
            raise ValueError("weights must be non-negative")
        if not self.c_s > 0:
            raise ValueError("c_s must be positive")
        if not 1 <= self.n_tight <= self.N:
            raise ValueError("n_tight must lie in [1, N]")
        if not self.v_max_step > 0:
            raise ValueError("v_max_step must be positive")

    @classmethod
    def from_config(cls, section: dict, Ts: float) -> "MPCCConfig":
        return cls(N=int(section["N"]), q_c=float(section["q_c"]), q_l=float(section["q_l"]),
                   gamma=float(section["gamma"]), r_u=tuple(float(v) for v in section["r_u"]),
                   r_v=float(section["r_v"]), q_s=float(section["q_s"]), c_s=float(section["c_s"]),
                   n_tight=int(section["n_tight"]), chi2_level=float(section["chi2_level"]),
                   v_max_step=float(section["v_max"]) * Ts)

    @property
    def n_var(self) -> int:
        return 4 * self.N


@dataclass(frozen=True)
class StageCost:
    """Stage cost value, gradient and Gauss-Newton Hessian.

    Derivatives are taken w.r.t. ``q = [x (6), theta, v, du (2), dv]``.
    """

    value: float
    grad: np.ndarray
    hess: np.ndarray


def stage_cost(x, u, theta: float, v: float, du, dv: float, config: MPCCConfig, track: Track) -> StageCost:
    """Exact contouring stage cost ``q_c e_c^2 + q_l e_l^2 - gamma v + |du|_Ru^2 + r_v dv^2``."""
    err = track.contouring_errors(x, theta)
    du = np.asarray(du, dtype=float)
    ru = np.asarray(config.r_u, dtype=float)
    value = (config.q_c * err.e_c ** 2 + config.q_l * err.e_l ** 2 - config.gamma * v
             + float(du @ (ru * du)) + config.r_v * dv * dv)
    # residual Jacobian rows over q
    jc = np.zeros(11)
    jl = np.zeros(11)
    jc[[0, 1, 6]] = err.grad_c
    jl[[0, 1, 6]] = err.grad_l
    grad = 2.0 * config.q_c * err.e_c * jc + 2.0 * config.q_l * err.e_l * jl
    grad[7] -= config.gamma
    grad[8:10] += 2.0 * ru * du
    grad[10] += 2.0 * config.r_v * dv
    hess = 2.0 * config.q_c * np.outer(jc, jc) + 2.0 * config.q_l * np.outer(jl, jl)
    hess[8, 8] += 2.0 * ru[0]
    hess[9, 9] += 2.0 * ru[1]
    hess[10, 10] += 2.0 * config.r_v
    return StageCost(float(value), grad, hess)


@dataclass
class Linearization:
    """First-order data of the OCP at a decision vector ``w``."""

    w: np.ndarray
    cost: float
    grad: np.ndarray
    hess: np.ndarray
    cons: np.ndarray
    jac: np.ndarray
    states: np.ndarray


@dataclass(frozen=True)
class Solution:
    inputs: np.ndarray
    progress: np.ndarray
    slacks: np.ndarray
    states: np.ndarray
    theta: np.ndarray
    cost: float
    status: str
    w: np.ndarray = field(repr=False)


class OCP:
    """Frozen contouring OCP at one control step.

    Instances are created by :func:`build_ocp`. Everything stored here is
    fixed for the solve; the solver only calls :meth:`linearize`,
    :meth:`evaluate` and :meth:`constraints`.
    """

    def __init__(self, config: MPCCConfig, params: VehicleParams, model, x0, theta0: float,
                 u_prev, v_prev: float, theta_bar, aff_c, aff_l, normals, centers, radii):
        self.config = config
        self.params = params
        self.model = model
        self._expansion = horizon.model_expansion(model)
        self.x0 = np.asarray(x0, dtype=float)
        self.theta0 = float(theta0)
        self.u_prev = np.asarray(u_prev, dtype=float)
        self.v_prev = float(v_prev)
        self.theta_bar = theta_bar
        self.aff_c = aff_c  # (N, 4): offset + gradient over (X, Y, Theta)
        self.aff_l = aff_l
        self.normals = normals
        self.centers = centers
        self.radii = radii
        N = config.N
        self.N = N
        self.n_var = 4 * N
        self.n_con = 2 * N
        self.iu = slice(0, 2 * N)
        self.iv = slice(2 * N, 3 * N)
        self.is_ = slice(3 * N, 4 * N)
        self.lb, self.ub = self._bounds()
        self._H_lin, self._h_lin, self._c_lin = self._linear_part()
        # Theta_i (i = 1..N) = theta0 + sum_{j < i} v_j
        self._T = np.tril(np.ones((N, N)))

    # -- fixed structure ----------------------------------------------------

    def _bounds(self) -> tuple[np.ndarray, np.ndarray]:
        N, c = self.N, self.config
        lb = np.empty(self.n_var)
        ub = np.empty(self.n_var)
        lb[0:2 * N:2], ub[0:2 * N:2] = 0.0, 1.0
        lb[1:2 * N:2], ub[1:2 * N:2] = -self.params.delta_max, self.params.delta_max
        lb[self.iv], ub[self.iv] = 0.0, c.v_max_step
        lb[self.is_], ub[self.is_] = 0.0, np.inf
        return lb, ub

    def _linear_part(self) -> tuple[np.ndarray, np.ndarray, float]:
        """Rate, progress and slack terms as ``0.5 w'Hw + h'w + c``."""
        N, c = self.N, self.config
        n = self.n_var
        H = np.zeros((n, n))
        h = np.zeros(n)
        const = 0.0
        # first differences with the previous input / progress as boundary value
        D = np.eye(N) - np.eye(N, k=-1)
        DtD = D.T @ D
        for j in range(NU):
            idx = np.arange(j, 2 * N, 2)
            H[np.ix_(idx, idx)] += 2.0 * c.r_u[j] * DtD
            h[idx[0]] -= 2.0 * c.r_u[j] * self.u_prev[j]
            const += c.r_u[j] * self.u_prev[j] ** 2
        iv = np.arange(2 * N, 3 * N)
        H[np.ix_(iv, iv)] += 2.0 * c.r_v * DtD
        h[iv[0]] -= 2.0 * c.r_v * self.v_prev
        const += c.r_v * self.v_prev ** 2
        h[iv] -= c.gamma
        is_ = np.arange(3 * N, 4 * N)
        H[is_, is_] += 2.0 * c.q_s
        h[is_] += c.c_s
        return H, h, const

    # -- simulation ---------------------------------------------------------

    def unpack(self, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=float)
        return w[self.iu].reshape(self.N, NU), w[self.iv], w[self.is_]

    def rollout(self, w) -> np.ndarray:
        """Mean states ``x_0..x_N`` for decision vector ``w``."""
        U, _, _ = self.unpack(w)
        return horizon.rollout(self.x0, U, self.params.array, self._expansion)

    def _rollout_sens(self, w):
        """States, input sensitivities ``S_i = dx_i/dU`` and per-step Jacobians."""
        U, _, _ = self.unpack(w)
        return horizon.rollout_sens(self.x0, U, self.params.array, self._expansion)

    def _second_order(self, xs, U, S, As, pos_weights) -> np.ndarray:
        """Curvature of ``sum_i pos_weights[i]' (X_i, Y_i)`` through the dynamics (UU block)."""
        return horizon.second_order(xs, U, S, As, pos_weights, self.params.array, self._expansion)

    # -- cost and constraints -----------------------------------------------

    def _errors(self, xs, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        theta = self.theta0 + self._T @ v
        pts = np.column_stack([xs[1:, 0], xs[1:, 1], theta])
        e_c = self.aff_c[:, 0] + np.einsum("ij,ij->i", self.aff_c[:, 1:], pts)
        e_l = self.aff_l[:, 0] + np.einsum("ij,ij->i", self.aff_l[:, 1:], pts)
        return e_c, e_l, theta

    def _lateral(self, xs) -> np.ndarray:
        return np.einsum("ij,ij->i", self.normals, xs[1:, :2] - self.centers)

    def constraints(self, w, xs=None) -> np.ndarray:
        """Lateral rows ``[+l_i - rho_i - s_i; -l_i - rho_i - s_i]``; feasible when ``<= 0``."""
        if xs is None:
            xs = self.rollout(w)
        _, _, s = self.unpack(w)
        lat = self._lateral(xs)
        return np.concatenate([lat - self.radii - s, -lat - self.radii - s])

    def cost(self, w, xs=None) -> float:
        w = np.asarray(w, dtype=float)
        if xs is None:
            xs = self.rollout(w)
        _, v, _ = self.unpack(w)
        e_c, e_l, _ = self._errors(xs, v)
        c = self.config
        quad = 0.5 * w @ self._H_lin @ w + self._h_lin @ w + self._c_lin
        return float(c.q_c * e_c @ e_c + c.q_l * e_l @ e_l + quad)

    def evaluate(self, w) -> tuple[float, np.ndarray, np.ndarray]:
        xs = self.rollout(w)
        return self.cost(w, xs), self.constraints(w, xs), xs

    def linearize(self, w) -> Linearization:
        """Cost, gradient, Hessian model, constraints and their Jacobian at ``w``.

        The Hessian is the Gauss-Newton matrix plus, when enabled, the
        positive semidefinite part of the residual-weighted curvature of the
        predicted positions.
        """
        w = np.asarray(w, dtype=float)
        N, c = self.N, self.config
        xs, S, As = self._rollout_sens(w)
        P = S[1:, :2, :]
        U, v, s = self.unpack(w)
        e_c, e_l, _ = self._errors(xs, v)
        # residual Jacobians (N x n) for e_c and e_l
        Jc = np.zeros((N, self.n_var))
        Jl = np.zeros((N, self.n_var))
        Jc[:, self.iu] = self.aff_c[:, 1:2] * P[:, 0] + self.aff_c[:, 2:3] * P[:, 1]
        Jl[:, self.iu] = self.aff_l[:, 1:2] * P[:, 0] + self.aff_l[:, 2:3] * P[:, 1]
        Jc[:, self.iv] = self.aff_c[:, 3:4] * self._T
        Jl[:, self.iv] = self.aff_l[:, 3:4] * self._T
        grad = 2.0 * c.q_c * Jc.T @ e_c + 2.0 * c.q_l * Jl.T @ e_l + self._H_lin @ w + self._h_lin
        hess = 2.0 * c.q_c * Jc.T @ Jc + 2.0 * c.q_l * Jl.T @ Jl + self._H_lin
        if c.second_order:
            pos_w = (2.0 * c.q_c * e_c[:, None] * self.aff_c[:, 1:3]
                     + 2.0 * c.q_l * e_l[:, None] * self.aff_l[:, 1:3])
            H2 = self._second_order(xs, U, S, As, pos_w)
            ev, V = np.linalg.eigh(H2)
            hess[self.iu, self.iu] += (V * np.maximum(ev, 0.0)) @ V.T
        cost = float(c.q_c * e_c @ e_c + c.q_l * e_l @ e_l + 0.5 * w @ self._H_lin @ w + self._h_lin @ w + self._c_lin)
        # lateral rows
        dlat = np.einsum("ik,ikj->ij", self.normals, P)
        lat = self._lateral(xs)
        jac = np.zeros((2 * N, self.n_var))
        jac[:N, self.iu] = dlat
        jac[N:, self.iu] = -dlat
        idx = np.arange(N)
        jac[idx, 3 * N + idx] = -1.0
        jac[N + idx, 3 * N + idx] = -1.0
        cons = np.concatenate([lat - self.radii - s, -lat - self.radii - s])
        return Linearization(w, cost, grad, hess, cons, jac, xs)

    def qp_start(self, w, cons) -> np.ndarray:
        """Feasible step for the linearized constraints: only slack components move."""
        N = self.N
        d = np.zeros(self.n_var)
        _, _, s = self.unpack(w)
        need = np.maximum(np.maximum(cons[:N], cons[N:]), 0.0)
        d[self.is_] = np.maximum(need, -s)
        return d

    # -- assembly helpers ---------------------------------------------------

    def solution(self, w, status: str) -> Solution:
        w = np.asarray(w, dtype=float)
        xs = self.rollout(w)
        U, v, s = self.unpack(w)
        theta = np.concatenate([[self.theta0], self.theta0 + np.cumsum(v)])
        return Solution(U.copy(), v.copy(), s.copy(), xs, theta, self.cost(w, xs), status, w.copy())

    def initial_guess(self, prev: Solution | None) -> np.ndarray:
        """Shifted previous decision vector, clipped to the bounds."""
        w = np.zeros(self.n_var)
        if prev is not None:
            U = np.vstack([prev.inputs[1:], prev.inputs[-1:]])
            v = np.concatenate([prev.progress[1:], prev.progress[-1:]])
            w[self.iu] = U.ravel()
            w[self.iv] = v
        w = np.clip(w, self.lb, self.ub)
        xs = self.rollout(w)
        cons = self.constraints(w, xs)
        w[self.is_] = np.maximum(np.maximum(cons[:self.N], cons[self.N:]) + w[self.is_], 0.0)
        return w

    def to_dict(self) -> dict:
        """Diagnostic dump of all frozen data."""
        return {
            "N": self.N,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.__dict__.items()},
            "x0": self.x0.tolist(),
            "theta0": self.theta0,
            "u_prev": self.u_prev.tolist(),
            "v_prev": self.v_prev,
            "theta_bar": self.theta_bar.tolist(),
            "aff_c": self.aff_c.tolist(),
            "aff_l": self.aff_l.tolist(),
            "normals": self.normals.tolist(),
            "centers": self.centers.tolist(),
            "radii": self.radii.tolist(),
            "lb": self.lb.tolist(),
            "ub": [None if math.isinf(b) else b for b in self.ub.tolist()],
            "H_const": self._H_lin.tolist(),
            "h_const": self._h_lin.tolist(),
        }


def build_ocp(x0, theta0: float, ref_states, ref_progress, u_prev, v_prev: float, model,
              tube: VarianceTube, track: Track, params: VehicleParams, config: MPCCConfig) -> OCP:
    """Freeze the contouring OCP around a reference trajectory.

    Args:
        x0: Measured state (pins ``x_0``).
        theta0: Progress at the measurement.
        ref_states: ``N + 1`` reference states; rows ``1..N`` are the
            linearization points of the contouring and lag errors.
        ref_progress: ``N`` reference progress increments; they define the
            frozen centerline parameters ``Theta_bar_i``.
        u_prev, v_prev: Previously applied input and progress increment.
        model: Residual model with ``mean`` and ``mean_and_grad``.
        tube: Variance tube on the same reference; ``tube.radii[i]`` bounds step ``i``.

    Returns:
        The frozen :class:`OCP`.
    """
    N = config.N
    ref_states = np.asarray(ref_states, dtype=float)
    ref_progress = np.asarray(ref_progress, dtype=float)
    if ref_states.shape != (N + 1, NX):
        raise OCPBuildError(f"reference states must have shape ({N + 1}, {NX}), got {ref_states.shape}")
    if ref_progress.shape != (N,):
        raise OCPBuildError(f"reference progress must have length {N}")
    if tube.horizon != N:
        raise OCPBuildError(f"tube horizon {tube.horizon} does not match N = {N}")
    if not (np.all(np.isfinite(ref_states)) and np.all(np.isfinite(ref_progress))):
        raise OCPBuildError("reference trajectory must be finite")
    theta_bar = float(theta0) + np.cumsum(ref_progress)
    aff_c = np.empty((N, 4))
    aff_l = np.empty((N, 4))
    normals = np.empty((N, 2))
    centers = np.empty((N, 2))
    for i in range(N):
        tb = float(theta_bar[i])
        err = track.contouring_errors(ref_states[i + 1], tb)
        pt = np.array([ref_states[i + 1, 0], ref_states[i + 1, 1], tb])
        aff_c[i, 0] = err.e_c - err.grad_c @ pt
        aff_c[i, 1:] = err.grad_c
        aff_l[i, 0] = err.e_l - err.grad_l @ pt
        aff_l[i, 1:] = err.grad_l
        xc, yc, dx, dy, _, _ = track.derivatives(tb)
        speed = math.hypot(dx, dy)
        normals[i] = (-dy / speed, dx / speed)
        centers[i] = (xc, yc)
    radii = np.array(tube.radii[1:], dtype=float)
    return OCP(config, params, model, x0, theta0, u_prev, v_prev, theta_bar, aff_c, aff_l,
               normals, centers, radii)


def evaluate_solution(ocp: OCP, w) -> tuple[float, np.ndarray, np.ndarray]:
    """Cost, constraint rows (feasible when ``<= 0``) and mean-state trajectory of ``w``."""
    return ocp.evaluate(w)
