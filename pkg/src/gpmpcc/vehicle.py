"""Bicycle-model race car dynamics with Pacejka tires and a DC drivetrain.

State ``x = [X, Y, Phi, vx, vy, omega]``, input ``u = [p, delta]``.
The controller model is the Euler-forward discretization of the continuous
dynamics; the simulated plant uses the same structure with perturbed
parameters and additive noise on the velocity states.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from functools import cached_property

import numpy as np

# NV counts the velocity states affected by residual dynamics and noise
from ._kernels import NU, NV, NX, NZ, _jac_kernel, _weighted_hessian_kernel, smooth_sign

STATE_NAMES = ("X", "Y", "Phi", "vx", "vy", "omega")
INPUT_NAMES = ("p", "delta")

# B_d = [0; I_3]
BD = np.vstack([np.zeros((3, 3)), np.eye(3)])

VX_MIN = 1.0  # default slip-angle guard [m/s]

# Ts and delta_max are setup constants, not physical parameters.
PHYSICAL_PARAMS = (
    "m", "Iz", "lf", "lr",
    "Bf", "Cf", "Df", "Br", "Cr", "Dr",
    "Cm1", "Cm2", "Cr0", "Cr2",
)


class ModelEvaluationError(ArithmeticError):
    """Raised when the vehicle model produces a non-finite value."""

    def __init__(self, field: str, value: float):
        super().__init__(f"non-finite {field} = {value!r}")
        self.field = field
        self.value = value


@dataclass(frozen=True)
class VehicleParams:
    m: float
    Iz: float
    lf: float
    lr: float
    Bf: float
    Cf: float
    Df: float
    Br: float
    Cr: float
    Dr: float
    Cm1: float
    Cm2: float
    Cr0: float
    Cr2: float
    delta_max: float
    Ts: float
    vx_min: float = VX_MIN

    def __post_init__(self):
        for name in ("m", "Iz", "lf", "lr", "Ts", "Df", "Dr", "delta_max", "vx_min"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"{f.name} must be finite")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @cached_property
    def array(self) -> np.ndarray:
        """All fields as a float array in declaration order (for compiled kernels)."""
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        missing = names - set(data) - {"vx_min"}
        if unknown or missing:
            parts = []
            if unknown:
                parts.append(f"unknown keys {sorted(unknown)}")
            if missing:
                parts.append(f"missing keys {sorted(missing)}")
            raise ValueError("; ".join(parts))
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class NoiseSpec:
    """Per-step variances of the additive noise on ``[vx, vy, omega]``."""

    sigma_w: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.sigma_w) != NV or any(not (s >= 0) for s in self.sigma_w):
            raise ValueError("sigma_w must be three non-negative variances")

    @classmethod
    def from_spectral_density(cls, q_w, Ts: float) -> "NoiseSpec":
        """Discretize a white-noise power spectral density: ``Sigma_w = Q_w * Ts``."""
        return cls(tuple(float(q) * Ts for q in q_w))

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.sigma_w)

    @property
    def is_zero(self) -> bool:
        return not any(self.sigma_w)


def _check(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise ModelEvaluationError(name, value)
    return value


def _pacejka(B: float, C: float, D: float, alpha: float) -> tuple[float, float]:
    """Simplified magic formula and its slope with respect to the slip angle."""
    ba = B * alpha
    inner = C * math.atan(ba)
    force = D * math.sin(inner)
    slope = D * math.cos(inner) * C * B / (1.0 + ba * ba)
    return force, slope


def tire_and_drive_forces(x, u, params: VehicleParams) -> tuple[float, float, float]:
    """Front/rear lateral tire forces and rear longitudinal drive force [N]."""
    _, _, _, vx, vy, om = (float(v) for v in x)
    p, delta = float(u[0]), float(u[1])
    avx = abs(vx)
    vxs = avx if avx > params.vx_min else params.vx_min
    sv, _ = smooth_sign(vx)
    alpha_f = -math.atan((vy + params.lf * om) / vxs) + sv * delta
    alpha_r = -math.atan((vy - params.lr * om) / vxs)
    ffy, _ = _pacejka(params.Bf, params.Cf, params.Df, alpha_f)
    fry, _ = _pacejka(params.Br, params.Cr, params.Dr, alpha_r)
    frx = (params.Cm1 - params.Cm2 * vx) * p - params.Cr0 * sv - params.Cr2 * vx * avx
    return _check("Ffy", ffy), _check("Fry", fry), _check("Frx", frx)


def continuous_dynamics(x, u, params: VehicleParams) -> np.ndarray:
    """Right-hand side ``f_c(x, u)`` of the bicycle model."""
    phi, vx, vy, om = float(x[2]), float(x[3]), float(x[4]), float(x[5])
    delta = float(u[1])
    ffy, fry, frx = tire_and_drive_forces(x, u, params)
    m = params.m
    c, s = math.cos(phi), math.sin(phi)
    cd, sd = math.cos(delta), math.sin(delta)
    return np.array([
        vx * c - vy * s,
        vx * s + vy * c,
        om,
        (frx - ffy * sd + m * vy * om) / m,
        (fry + ffy * cd - m * vx * om) / m,
        (ffy * params.lf * cd - fry * params.lr) / params.Iz,
    ])


def continuous_jacobians(x, u, params: VehicleParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``f_c``, ``df_c/dx`` (6x6) and ``df_c/du`` (6x2) in closed form."""
    f = np.empty(NX)
    A = np.empty((NX, NX))
    B = np.empty((NX, NU))
    if not _jac_kernel(np.asarray(x, dtype=float), np.asarray(u, dtype=float), params.array, f, A, B):
        tire_and_drive_forces(x, u, params)  # raises with the offending field
        raise ModelEvaluationError("f", float("nan"))
    return f, A, B


def weighted_hessian(x, u, params: VehicleParams, lam, step: float = 1e-5) -> np.ndarray:
    """Hessian of ``lam' f_c(x, u)`` w.r.t. ``z = [x; u]`` (8x8, symmetrized).

    Built from central differences of the closed-form Jacobians.
    """
    H = np.zeros((NZ, NZ))
    ok = _weighted_hessian_kernel(np.asarray(x, dtype=float), np.asarray(u, dtype=float), params.array,
                                  np.asarray(lam, dtype=float), step, H)
    if not ok:
        raise ModelEvaluationError("f", float("nan"))
    return 0.5 * (H + H.T)


def discrete_step(x, u, params: VehicleParams) -> np.ndarray:
    """Nominal Euler-forward step ``x + Ts * f_c(x, u)``."""
    return np.asarray(x, dtype=float) + params.Ts * continuous_dynamics(x, u, params)


def discrete_jacobians(x, u, params: VehicleParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Next state and its Jacobians for the Euler-forward model."""
    f, A, B = continuous_jacobians(x, u, params)
    Ts = params.Ts
    return np.asarray(x, dtype=float) + Ts * f, np.eye(NX) + Ts * A, Ts * B


def perturbed_plant(params: VehicleParams, magnitude: float, seed: int) -> VehicleParams:
    """Scale every physical parameter by an independent factor in ``[1-a, 1+a]``."""
    if not 0.0 <= magnitude < 1.0:
        raise ValueError("magnitude must lie in [0, 1)")
    if magnitude == 0.0:
        return params
    rng = np.random.default_rng(seed)
    factors = rng.uniform(1.0 - magnitude, 1.0 + magnitude, size=len(PHYSICAL_PARAMS))
    changes = {name: getattr(params, name) * float(k) for name, k in zip(PHYSICAL_PARAMS, factors)}
    return replace(params, **changes)


def plant_step(x, u, params_true: VehicleParams, noise: NoiseSpec, rng: np.random.Generator,
               substeps: int = 1) -> np.ndarray:
    """Advance the simulated plant one sampling interval.

    The continuous dynamics are integrated with ``substeps`` Euler steps of
    ``Ts / substeps``; noise ``w ~ N(0, Sigma_w)`` enters the velocity states.
    """
    x = np.asarray(x, dtype=float)
    if substeps == 1:
        x_next = x + params_true.Ts * continuous_dynamics(x, u, params_true)
    else:
        h = params_true.Ts / substeps
        x_next = x
        for _ in range(substeps):
            x_next = x_next + h * continuous_dynamics(x_next, u, params_true)
    if not noise.is_zero:
        w = rng.normal(size=NV) * np.sqrt(noise.sigma_w)
        x_next = x_next.copy()
        x_next[3:] += w
    return x_next
