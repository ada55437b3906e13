"""Compiled numerical kernels shared by the vehicle model and the horizon code.

All ``njit`` code lives in this one module so that the on-disk compilation
cache is invalidated whenever any kernel changes.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

NX = 6
NU = 2
NZ = NX + NU
NV = 3

# direction-dependent terms flip smoothly over -V_SIGN < vx < 0 [m/s]
V_SIGN = 0.1


@njit(cache=True)
def smooth_sign(v):
    """C1 sign of the travel direction and its derivative.

    Exactly +1 for ``v >= 0`` (standstill counts as forward) and -1 for
    ``v <= -V_SIGN``, with a cubic smoothstep in between.
    """
    if v >= 0.0:
        return 1.0, 0.0
    if v <= -V_SIGN:
        return -1.0, 0.0
    t = (v + V_SIGN) / V_SIGN
    return t * t * (6.0 - 4.0 * t) - 1.0, 12.0 * t * (1.0 - t) / V_SIGN


@njit(cache=True)
def _jac_kernel(x, u, prm, f, A, B):
    """Fill ``f_c``, ``df_c/dx`` and ``df_c/du``; returns False on a non-finite force."""
    m, Iz, lf, lr = prm[0], prm[1], prm[2], prm[3]
    Bf, Cf, Df, Br, Cr, Dr = prm[4], prm[5], prm[6], prm[7], prm[8], prm[9]
    Cm1, Cm2, Cr0, Cr2 = prm[10], prm[11], prm[12], prm[13]
    phi, vx, vy, om = x[2], x[3], x[4], x[5]
    p, delta = u[0], u[1]

    vx_min = prm[16]
    avx = abs(vx)
    sgn = 1.0 if vx >= 0.0 else -1.0
    clamped = avx <= vx_min
    vxs = vx_min if clamped else avx
    a = (vy + lf * om) / vxs
    b = (vy - lr * om) / vxs
    sv, dsv = smooth_sign(vx)
    # in reverse the steering angle acts on the slip with opposite sign
    alpha_f = -math.atan(a) + sv * delta
    alpha_r = -math.atan(b)
    ba = Bf * alpha_f
    inner = Cf * math.atan(ba)
    ffy = Df * math.sin(inner)
    dffy = Df * math.cos(inner) * Cf * Bf / (1.0 + ba * ba)
    ba = Br * alpha_r
    inner = Cr * math.atan(ba)
    fry = Dr * math.sin(inner)
    dfry = Dr * math.cos(inner) * Cr * Br / (1.0 + ba * ba)
    frx = (Cm1 - Cm2 * vx) * p - Cr0 * sv - Cr2 * vx * avx
    if not (math.isfinite(ffy) and math.isfinite(fry) and math.isfinite(frx)):
        return False

    ga = 1.0 / (vxs * (1.0 + a * a))
    gb = 1.0 / (vxs * (1.0 + b * b))
    # slip-angle partials w.r.t. (vx, vy, omega, delta)
    daf_vx = (0.0 if clamped else sgn * a * ga) + dsv * delta
    dar_vx = 0.0 if clamped else sgn * b * gb
    f_vx, f_vy, f_om, f_d = dffy * daf_vx, -dffy * ga, -dffy * lf * ga, dffy * sv
    r_vx, r_vy, r_om = dfry * dar_vx, -dfry * gb, dfry * lr * gb
    dfrx_vx = -Cm2 * p - Cr0 * dsv - 2.0 * Cr2 * avx
    dfrx_p = Cm1 - Cm2 * vx

    c, s = math.cos(phi), math.sin(phi)
    cd, sd = math.cos(delta), math.sin(delta)
    f[0] = vx * c - vy * s
    f[1] = vx * s + vy * c
    f[2] = om
    f[3] = (frx - ffy * sd + m * vy * om) / m
    f[4] = (fry + ffy * cd - m * vx * om) / m
    f[5] = (ffy * lf * cd - fry * lr) / Iz

    A[:, :] = 0.0
    A[0, 2] = -vx * s - vy * c
    A[0, 3] = c
    A[0, 4] = -s
    A[1, 2] = vx * c - vy * s
    A[1, 3] = s
    A[1, 4] = c
    A[2, 5] = 1.0
    # rows 3..5 over columns (vx, vy, omega)
    A[3, 3] = (dfrx_vx - f_vx * sd) / m
    A[3, 4] = (-f_vy * sd) / m + om
    A[3, 5] = (-f_om * sd) / m + vy
    A[4, 3] = (r_vx + f_vx * cd) / m - om
    A[4, 4] = (r_vy + f_vy * cd) / m
    A[4, 5] = (r_om + f_om * cd) / m - vx
    A[5, 3] = (f_vx * lf * cd - r_vx * lr) / Iz
    A[5, 4] = (f_vy * lf * cd - r_vy * lr) / Iz
    A[5, 5] = (f_om * lf * cd - r_om * lr) / Iz

    B[:, :] = 0.0
    B[3, 0] = dfrx_p / m
    B[3, 1] = (-f_d * sd - ffy * cd) / m
    B[4, 1] = (f_d * cd - ffy * sd) / m
    B[5, 1] = (f_d * lf * cd - ffy * lf * sd) / Iz
    return True


@njit(cache=True)
def _weighted_hessian_kernel(x, u, prm, lam, step, H):
    """Central differences of ``grad_z (lam' f_c)`` over ``z = [x; u]``."""
    f = np.empty(NX)
    A = np.empty((NX, NX))
    B = np.empty((NX, NU))
    xp = x.copy()
    up = u.copy()
    ok = True
    for j in range(NZ):
        for sgn in (1.0, -1.0):
            xp[:] = x
            up[:] = u
            if j < NX:
                xp[j] += sgn * step
            else:
                up[j - NX] += sgn * step
            ok = _jac_kernel(xp, up, prm, f, A, B) and ok
            scale = sgn / (2.0 * step)
            for k in range(NX):
                for i in range(NX):
                    H[i, j] += scale * A[k, i] * lam[k]
                for i in range(NU):
                    H[NX + i, j] += scale * B[k, i] * lam[k]
    return ok


@njit(cache=True)
def _mean_grad(z, Z, coef, sf2, inv_ell, mu, grad):
    for a in range(NV):
        mu[a] = 0.0
        for i in range(NZ):
            grad[a, i] = 0.0
    diff = np.empty(NZ)
    for j in range(Z.shape[0]):
        for i in range(NZ):
            diff[i] = z[i] - Z[j, i]
        for a in range(NV):
            q = 0.0
            for i in range(NZ):
                t = diff[i] * inv_ell[a, i]
                q += t * t
            wk = coef[a, j] * sf2[a] * math.exp(-0.5 * q)
            mu[a] += wk
            for i in range(NZ):
                grad[a, i] -= wk * diff[i] * inv_ell[a, i] * inv_ell[a, i]


@njit(cache=True)
def _mean_hessian(z, Z, coef, sf2, inv_ell, weights, H):
    """Add ``sum_a weights[a] * d^2 mu_a / dz^2`` to ``H``."""
    diff = np.empty(NZ)
    dl = np.empty(NZ)
    for j in range(Z.shape[0]):
        for i in range(NZ):
            diff[i] = z[i] - Z[j, i]
        for a in range(NV):
            if weights[a] == 0.0:
                continue
            q = 0.0
            for i in range(NZ):
                t = diff[i] * inv_ell[a, i]
                q += t * t
            wk = weights[a] * coef[a, j] * sf2[a] * math.exp(-0.5 * q)
            for i in range(NZ):
                dl[i] = diff[i] * inv_ell[a, i] * inv_ell[a, i]
            for i in range(NZ):
                for k in range(NZ):
                    H[i, k] += wk * dl[i] * dl[k]
                H[i, i] -= wk * inv_ell[a, i] * inv_ell[a, i]


@njit(cache=True)
def _rollout(x0, U, prm, Z, coef, sf2, inv_ell, xs):
    Ts = prm[15]
    f = np.empty(NX)
    A = np.empty((NX, NX))
    B = np.empty((NX, NU))
    mu = np.empty(NV)
    grad = np.empty((NV, NZ))
    z = np.empty(NZ)
    xs[0] = x0
    for i in range(U.shape[0]):
        if not _jac_kernel(xs[i], U[i], prm, f, A, B):
            return False
        z[:NX] = xs[i]
        z[NX:] = U[i]
        _mean_grad(z, Z, coef, sf2, inv_ell, mu, grad)
        for k in range(NX):
            xs[i + 1, k] = xs[i, k] + Ts * f[k]
        for a in range(NV):
            xs[i + 1, 3 + a] += mu[a]
    return True


@njit(cache=True)
def _rollout_sens(x0, U, prm, Z, coef, sf2, inv_ell, xs, S, As):
    """Fill states, step Jacobians ``As`` and sensitivities ``S[i] = dx_i/dU``."""
    Ts = prm[15]
    N = U.shape[0]
    f = np.empty(NX)
    A = np.empty((NX, NX))
    B = np.empty((NX, NU))
    mu = np.empty(NV)
    grad = np.empty((NV, NZ))
    z = np.empty(NZ)
    xs[0] = x0
    S[0] = 0.0
    for i in range(N):
        if not _jac_kernel(xs[i], U[i], prm, f, A, B):
            return False
        z[:NX] = xs[i]
        z[NX:] = U[i]
        _mean_grad(z, Z, coef, sf2, inv_ell, mu, grad)
        for k in range(NX):
            xs[i + 1, k] = xs[i, k] + Ts * f[k]
            for c in range(NX):
                As[i, k, c] = Ts * A[k, c] + (1.0 if k == c else 0.0)
            B[k, 0] *= Ts
            B[k, 1] *= Ts
        for a in range(NV):
            xs[i + 1, 3 + a] += mu[a]
            for c in range(NX):
                As[i, 3 + a, c] += grad[a, c]
            for c in range(NU):
                B[3 + a, c] += grad[a, NX + c]
        ncol = 2 * i
        for k in range(NX):
            for c in range(ncol):
                acc = 0.0
                for m in range(NX):
                    acc += As[i, k, m] * S[i, m, c]
                S[i + 1, k, c] = acc
            S[i + 1, k, ncol] = B[k, 0]
            S[i + 1, k, ncol + 1] = B[k, 1]
            for c in range(ncol + 2, S.shape[2]):
                S[i + 1, k, c] = 0.0
    return True


@njit(cache=True)
def _second_order(xs, U, S, As, pos_weights, prm, Z, coef, sf2, inv_ell, step, H):
    """Adjoint accumulation of ``sum_i Z_i' M_i Z_i`` into ``H`` (2N x 2N)."""
    N = U.shape[0]
    Ts = prm[15]
    lam = np.zeros(NX)
    tmp = np.empty(NX)
    M = np.empty((NZ, NZ))
    z = np.empty(NZ)
    ok = True
    for i in range(N - 1, -1, -1):
        # lam holds d(objective)/dx_{i+1}
        if i + 1 < N:
            for k in range(NX):
                acc = 0.0
                for m in range(NX):
                    acc += As[i + 1, m, k] * lam[m]
                tmp[k] = acc
            lam[:] = tmp
        lam[0] += pos_weights[i, 0]
        lam[1] += pos_weights[i, 1]
        M[:, :] = 0.0
        ok = _weighted_hessian_kernel(xs[i], U[i], prm, lam, step, M) and ok
        for r in range(NZ):
            for c in range(NZ):
                M[r, c] *= Ts
        z[:NX] = xs[i]
        z[NX:] = U[i]
        _mean_hessian(z, Z, coef, sf2, inv_ell, lam[3:], M)
        cols = 2 * i + 2
        # Zi = [S_i(:, :cols); E_i] with E_i selecting u_i
        G = np.zeros((NZ, cols))
        for r in range(NZ):
            for c in range(cols - 2):
                acc = 0.0
                for m in range(NX):
                    acc += (M[r, m] + M[m, r]) * 0.5 * S[i, m, c]
                G[r, c] = acc
            for c in range(2):
                G[r, cols - 2 + c] = 0.5 * (M[r, NX + c] + M[NX + c, r])
        for a in range(cols):
            for b in range(cols):
                acc = 0.0
                if a < cols - 2:
                    for m in range(NX):
                        acc += S[i, m, a] * G[m, b]
                else:
                    acc = G[NX + a - (cols - 2), b]
                H[a, b] += acc
    return ok
