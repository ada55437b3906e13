"""FITC sparse GP with inducing inputs that follow the MPC trajectory.

The caches use the form that avoids inverting ``Q_zz + Lambda``:

    Sigma^-1 = K_uu + K_uz Lambda^-1 K_zu
    mean(z)  = k_zu Sigma K_uz Lambda^-1 y
    var(z)   = k_zz - k_zu K_uu^-1 k_uz + k_zu Sigma k_uz

Replacing one inducing input changes one row/column of ``Sigma^-1`` (for a
fixed ``Lambda``) plus a diagonal reweighting of the data terms; both are
applied to the Cholesky factor with rank-1 operations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .cholesky import DowndateError, chol_append, chol_delete, chol_update_many
from .gp import GPModel, SEHyper, _weighted_mean_hessian, jittered_cholesky, kernel_matrix

logger = logging.getLogger(__name__)

# corrections whose contribution is below this fraction of max(diag Sigma^-1) are skipped
SKIP_TOL = 1e-15


class SparseBuildError(ValueError):
    """Inducing set or parent model unusable for a FITC approximation."""


@dataclass(frozen=True)
class InducingSet:
    """Inducing inputs and the horizon index each one was taken from."""

    Z: np.ndarray
    positions: tuple[int, ...]

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        object.__setattr__(self, "Z", Z)
        if Z.shape[0] < 1:
            raise SparseBuildError("inducing set must not be empty")
        if len(self.positions) != Z.shape[0]:
            raise SparseBuildError("one position per inducing input is required")
        if not np.all(np.isfinite(Z)):
            raise SparseBuildError("inducing inputs must be finite")

    @property
    def size(self) -> int:
        return self.Z.shape[0]


@dataclass
class FITCCache:
    """Per-output-dimension factors; treated as read-only once built."""

    jitter: float
    Kuz: np.ndarray       # (Mi, M)
    L_uu: np.ndarray      # chol(K_uu + jitter I)
    lam: np.ndarray       # diag Lambda (M,)
    L_sig: np.ndarray     # chol(Sigma^-1)
    b: np.ndarray         # K_uz Lambda^-1 y
    beta: np.ndarray = field(default=None)   # Sigma b
    W: np.ndarray = field(default=None)      # K_uu^-1 - Sigma

    def finalize(self) -> "FITCCache":
        n = self.L_uu.shape[0]
        self.beta = cho_solve((self.L_sig, True), self.b)
        eye = np.eye(n)
        self.W = cho_solve((self.L_uu, True), eye) - cho_solve((self.L_sig, True), eye)
        return self

    def sigma_inv(self) -> np.ndarray:
        return self.L_sig @ self.L_sig.T


def _lambda(Kuz: np.ndarray, L_uu: np.ndarray, h: SEHyper) -> np.ndarray:
    V = solve_triangular(L_uu, Kuz, lower=True, check_finite=False)
    return np.maximum(h.signal_var - np.sum(V * V, axis=0), 0.0) + h.noise_var


def _build_cache(Z: np.ndarray, y: np.ndarray, Zu: np.ndarray, h: SEHyper,
                 jitter: float | None = None) -> FITCCache:
    Kuu = kernel_matrix(Zu, Zu, h)
    n = Zu.shape[0]
    if jitter is None:
        L_uu, jitter = jittered_cholesky(Kuu, h.signal_var)
    else:
        L_uu = np.linalg.cholesky(Kuu + jitter * np.eye(n))
    Kuz = kernel_matrix(Zu, Z, h)
    lam = _lambda(Kuz, L_uu, h)
    S_inv = Kuu + jitter * np.eye(n) + (Kuz / lam) @ Kuz.T
    L_sig, _ = jittered_cholesky(S_inv, h.signal_var)
    b = Kuz @ (y / lam)
    return FITCCache(jitter, Kuz, L_uu, lam, L_sig, b).finalize()


class SparseGPModel:
    """FITC approximation of a fitted :class:`GPModel` at an inducing set."""

    def __init__(self, parent: GPModel, inducing: InducingSet, caches: list[FITCCache],
                 updates_since_rebuild: int = 0):
        self.parent = parent
        self.inducing = inducing
        self.caches = caches
        self.hypers = parent.hypers
        self.n_out = parent.n_out
        self.n_in = parent.n_in
        self.updates_since_rebuild = updates_since_rebuild
        self._inv_ell = np.array([1.0 / np.asarray(h.lengthscales) for h in self.hypers])
        self._inv_ell2 = self._inv_ell ** 2
        self._sf2 = np.array([h.signal_var for h in self.hypers])
        self._beta = np.array([c.beta for c in caches])

    @property
    def Z(self) -> np.ndarray:
        return self.inducing.Z

    def _kernel_rows(self, z):
        diff = np.asarray(z, dtype=float)[None, :] - self.Z
        k = np.empty((self.n_out, self.Z.shape[0]))
        for a in range(self.n_out):
            sd = diff * self._inv_ell[a]
            k[a] = self._sf2[a] * np.exp(-0.5 * np.einsum("ij,ij->i", sd, sd))
        return diff, k

    def predict(self, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Approximate posterior mean, variance and mean gradient at ``z``."""
        diff, k = self._kernel_rows(z)
        wk = self._beta * k
        mu = wk.sum(axis=1)
        grad = -(wk @ diff) * self._inv_ell2
        var = np.empty(self.n_out)
        for a, c in enumerate(self.caches):
            var[a] = min(max(self._sf2[a] - k[a] @ c.W @ k[a], 0.0), self._sf2[a])
        return mu, var, grad

    def mean_and_grad(self, z) -> tuple[np.ndarray, np.ndarray]:
        diff, k = self._kernel_rows(z)
        wk = self._beta * k
        return wk.sum(axis=1), -(wk @ diff) * self._inv_ell2

    def mean_hessian(self, z, weights) -> np.ndarray:
        """Weighted sum of the approximate mean Hessians (n_in x n_in)."""
        diff = np.asarray(z, dtype=float)[None, :] - self.Z
        return _weighted_mean_hessian(diff, self._beta, self._sf2, self._inv_ell, self._inv_ell2, weights)

    def mean_expansion(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.Z, self._beta, self._sf2, self._inv_ell

    def mean(self, z) -> np.ndarray:
        _, k = self._kernel_rows(z)
        return np.sum(self._beta * k, axis=1)

    def predict_batch(self, Zq) -> tuple[np.ndarray, np.ndarray]:
        Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
        mu = np.empty((Zq.shape[0], self.n_out))
        var = np.empty_like(mu)
        for a, (h, c) in enumerate(zip(self.hypers, self.caches)):
            K = kernel_matrix(Zq, self.Z, h)
            mu[:, a] = K @ c.beta
            var[:, a] = np.clip(h.signal_var - np.einsum("ij,jk,ik->i", K, c.W, K), 0.0, h.signal_var)
        return mu, var

    def max_cache_error(self, other: "SparseGPModel") -> float:
        """Largest absolute difference over all cached quantities."""
        err = 0.0
        for c1, c2 in zip(self.caches, other.caches):
            for name in ("L_uu", "lam", "L_sig", "b", "beta", "W"):
                err = max(err, float(np.max(np.abs(getattr(c1, name) - getattr(c2, name)))))
        return err


def build_fitc(model: GPModel, ind: InducingSet, jitters: list[float] | None = None) -> SparseGPModel:
    """Assemble FITC caches from scratch; evaluation cost afterwards depends only on the inducing count."""
    if model.dataset.size < 1:
        raise SparseBuildError("parent GP has no data")
    Z, Y = model.dataset.Z, model.dataset.Y
    caches = []
    for a, h in enumerate(model.hypers):
        try:
            caches.append(_build_cache(Z, Y[:, a], ind.Z, h, None if jitters is None else jitters[a]))
        except np.linalg.LinAlgError as err:
            raise SparseBuildError(f"ill-conditioned inducing kernel matrix: {err}") from err
    return SparseGPModel(model, ind, caches)


def rebuild(sgp: SparseGPModel) -> SparseGPModel:
    return build_fitc(sgp.parent, sgp.inducing)


def _scaled_min_distance(z: np.ndarray, Z: np.ndarray, hypers: list[SEHyper]) -> float:
    if Z.shape[0] == 0:
        return np.inf
    return min(float(np.min(np.linalg.norm((Z - z) / np.asarray(h.lengthscales), axis=1))) for h in hypers)


def update_inducing(sgp: SparseGPModel, remove_index: int, add_point, position: int = -1,
                    stats: dict | None = None) -> SparseGPModel:
    """Swap one inducing input using rank-1 factor modifications.

    The point at ``remove_index`` is deleted and ``add_point`` appended at the
    end. If a downdate loses definiteness the caches are rebuilt from scratch
    (counted in ``stats['rebuilds']``).
    """
    Zu = sgp.inducing.Z
    if not 0 <= remove_index < Zu.shape[0]:
        raise IndexError("remove_index out of range")
    add_point = np.asarray(add_point, dtype=float)
    keep = [i for i in range(Zu.shape[0]) if i != remove_index]
    Zu_new = np.vstack([Zu[keep], add_point[None, :]])
    positions = tuple(sgp.inducing.positions[i] for i in keep) + (int(position),)
    new_set = InducingSet(Zu_new, positions)
    if stats is not None:
        stats["swaps"] = stats.get("swaps", 0) + 1

    Z, Y = sgp.parent.dataset.Z, sgp.parent.dataset.Y
    caches = []
    try:
        for a, (h, c) in enumerate(zip(sgp.hypers, sgp.caches)):
            caches.append(_swap_cache(c, Z, Y[:, a], Zu_new, remove_index, h))
    except (DowndateError, np.linalg.LinAlgError) as err:
        logger.info("rank-1 swap failed (%s); rebuilding sparse caches", err)
        if stats is not None:
            stats["rebuilds"] = stats.get("rebuilds", 0) + 1
        return build_fitc(sgp.parent, new_set)
    return SparseGPModel(sgp.parent, new_set, caches, sgp.updates_since_rebuild + 1)


def _swap_cache(c: FITCCache, Z, y, Zu_new, r: int, h: SEHyper) -> FITCCache:
    z_new = Zu_new[-1:]
    k_new_u = kernel_matrix(z_new, Zu_new[:-1], h)[0]
    k_new_z = kernel_matrix(z_new, Z, h)[0]
    kss = h.signal_var + c.jitter

    # K_uu factor: drop row/col r, append the new point
    L_uu = chol_append(chol_delete(c.L_uu, r), k_new_u, kss)

    # Sigma^-1 factor with the old Lambda
    Kuz_keep = np.delete(c.Kuz, r, axis=0)
    col = k_new_u + Kuz_keep @ (k_new_z / c.lam)
    diag = kss + k_new_z @ (k_new_z / c.lam)
    L_sig = chol_append(chol_delete(c.L_sig, r), col, diag)

    # Lambda changes with the inducing set: signed rank-1 corrections per data point
    Kuz = np.vstack([Kuz_keep, k_new_z[None, :]])
    lam = _lambda(Kuz, L_uu, h)
    delta = 1.0 / lam - 1.0 / c.lam
    weight = np.abs(delta) * np.sum(Kuz * Kuz, axis=0)
    threshold = SKIP_TOL * float(np.max(np.diag(L_sig) ** 2))
    pos = np.where((delta > 0) & (weight > threshold))[0]
    neg = np.where((delta < 0) & (weight > threshold))[0]
    idx = np.concatenate([pos, neg])
    if idx.size:
        X = (Kuz[:, idx] * np.sqrt(np.abs(delta[idx]))).T
        signs = np.sign(delta[idx])
        L_sig = chol_update_many(L_sig, X, signs)
    b = Kuz @ (y / lam)
    return FITCCache(c.jitter, Kuz, L_uu, lam, L_sig, b).finalize()


def inducing_indices(horizon: int, count: int, decay: float) -> list[int]:
    """Horizon indices with gaps growing geometrically by ``decay``; always starts at 0."""
    if count > horizon:
        raise ValueError("cannot place more inducing inputs than horizon points")
    if count == 1:
        return [0]
    last = horizon - 1
    if abs(decay - 1.0) < 1e-12:
        raw = [k * last / (count - 1) for k in range(count)]
    else:
        g0 = last * (decay - 1.0) / (decay ** (count - 1) - 1.0)
        raw = [g0 * (decay ** k - 1.0) / (decay - 1.0) for k in range(count)]
    idx = []
    for k, v in enumerate(raw):
        i = int(round(v))
        lo = idx[-1] + 1 if idx else 0
        hi = last - (count - 1 - k)
        idx.append(min(max(i, lo), hi))
    return idx


def select_inducing(trajectory_z, count: int, decay: float, hypers: list[SEHyper] | None = None,
                    min_separation: float = 1e-6) -> InducingSet:
    """Pick ``count`` points of a horizon trajectory with decaying density.

    ``trajectory_z`` holds ``z_i = [x_i; u_i]`` for ``i = 0..N-1``. Points closer
    than ``min_separation`` (length-scale normalized) to an already chosen one
    are replaced by the nearest unused horizon point; if that runs out, the
    remaining slots are filled by uniform spacing.
    """
    traj = np.atleast_2d(np.asarray(trajectory_z, dtype=float))
    N = traj.shape[0]
    targets = inducing_indices(N, count, decay)
    if hypers is None or min_separation <= 0:
        return InducingSet(traj[targets], tuple(targets))
    chosen: list[int] = []
    for t in targets:
        candidates = sorted(set(range(N)) - set(chosen), key=lambda i: (abs(i - t), i))
        for i in candidates:
            if _scaled_min_distance(traj[i], traj[chosen], hypers) >= min_separation:
                chosen.append(i)
                break
        else:
            break
    if len(chosen) < count:
        uniform = inducing_indices(N, count, 1.0)
        chosen = uniform
    chosen.sort()
    return InducingSet(traj[chosen], tuple(chosen))


def refresh_inducing(sgp: SparseGPModel, trajectory_z, count: int, decay: float,
                     min_separation: float = 1e-6, incremental: bool = True,
                     stats: dict | None = None) -> SparseGPModel:
    """Move the inducing set to a new (shifted) horizon trajectory.

    Existing points are aged by one step; those whose new horizon index is
    still a target are kept and every other target is filled by a swap.
    """
    traj = np.atleast_2d(np.asarray(trajectory_z, dtype=float))
    target = select_inducing(traj, count, decay, sgp.hypers, min_separation)
    if not incremental:
        return build_fitc(sgp.parent, target)
    wanted = set(target.positions)
    aged = [p - 1 for p in sgp.inducing.positions]
    kept: set[int] = set()
    removable = []
    for p in aged:
        if p in wanted and p not in kept:
            kept.add(p)
            removable.append(False)
        else:
            removable.append(True)
    missing = [p for p in target.positions if p not in kept]
    current = SparseGPModel(sgp.parent, InducingSet(sgp.inducing.Z, tuple(aged)), sgp.caches,
                            sgp.updates_since_rebuild)
    for p in missing:
        z = traj[p]
        removal = removable.index(True)
        others = np.delete(current.inducing.Z, removal, axis=0)
        if _scaled_min_distance(z, others, sgp.hypers) < min_separation:
            if stats is not None:
                stats["rebuilds"] = stats.get("rebuilds", 0) + 1
            return build_fitc(sgp.parent, target)
        current = update_inducing(current, removal, z, p, stats)
        removable.pop(removal)
        removable.append(False)
    return current
