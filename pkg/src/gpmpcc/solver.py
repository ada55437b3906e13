"""Primal active-set QP solver and a Gauss-Newton SQP loop for the contouring OCP."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-10


@dataclass
class QPSubproblem:
    """``min 0.5 x'Hx + g'x  s.t.  A x <= b,  lb <= x <= ub``."""

    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        n = self.g.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.H.shape != (n, n) or self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("inconsistent QP dimensions")
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("constraint rows and right-hand side differ in length")
        if not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.b)):
            raise ValueError("constraint data must be finite")

    @property
    def n(self) -> int:
        return self.g.shape[0]


@dataclass
class QPResult:
    """Primal solution with multipliers.

    ``lam`` belongs to the general rows, ``nu_lb`` and ``nu_ub`` to the lower
    and upper bounds; all are non-negative and satisfy
    ``Hx + g + A'lam - nu_lb + nu_ub = 0``.
    """

    x: np.ndarray
    lam: np.ndarray
    nu_lb: np.ndarray
    nu_ub: np.ndarray
    status: str
    iterations: int
    working_set: tuple = ()


def kkt_residuals(qp: QPSubproblem, res: QPResult) -> dict[str, float]:
    """Stationarity, primal feasibility and complementarity (infinity norms)."""
    x = res.x
    stat = qp.H @ x + qp.g + qp.A.T @ res.lam - res.nu_lb + res.nu_ub
    slack_rows = qp.b - qp.A @ x
    viol = max(float(np.max(-slack_rows, initial=0.0)),
               float(np.max(qp.lb - x, initial=0.0)), float(np.max(x - qp.ub, initial=0.0)))
    lo_gap = np.where(np.isfinite(qp.lb), x - qp.lb, 0.0)
    hi_gap = np.where(np.isfinite(qp.ub), qp.ub - x, 0.0)
    comp = max(float(np.max(np.abs(res.lam * slack_rows), initial=0.0)),
               float(np.max(np.abs(res.nu_lb * lo_gap), initial=0.0)),
               float(np.max(np.abs(res.nu_ub * hi_gap), initial=0.0)))
    dual = min(float(np.min(res.lam, initial=0.0)), float(np.min(res.nu_lb, initial=0.0)),
               float(np.min(res.nu_ub, initial=0.0)))
    return {"stationarity": float(np.max(np.abs(stat), initial=0.0)), "primal": viol,
            "complementarity": comp, "dual": -dual}


def _active_set(H, g, A, b, lb, ub, x, fixed, rows, max_iter):
    """Primal active-set iterations from a feasible ``x``.

    ``fixed`` maps variable index to -1 (at lower) or +1 (at upper);
    ``rows`` lists general rows in the working set. Returns
    ``(x, lam, nu_lb, nu_ub, iterations, converged)``.
    """
    n = x.shape[0]
    m = A.shape[0]
    rows = list(rows)
    fixed = dict(fixed)
    it = 0
    while it < max_iter:
        it += 1
        free = np.array([j for j in range(n) if j not in fixed], dtype=int)
        grad = H @ x + g
        Aw = A[rows][:, free] if rows else np.zeros((0, free.size))
        nf, nw = free.size, len(rows)
        K = np.zeros((nf + nw, nf + nw))
        K[:nf, :nf] = H[np.ix_(free, free)]
        K[:nf, nf:] = Aw.T
        K[nf:, :nf] = Aw
        rhs = np.concatenate([-grad[free], np.zeros(nw)])
        ray = False
        try:
            sol = np.linalg.solve(K, rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError("non-finite KKT solution")
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            resid_k = rhs - K @ sol
            if float(np.max(np.abs(resid_k), initial=0.0)) > 1e-10 * (1.0 + float(np.max(np.abs(rhs), initial=0.0))):
                # inconsistent system: the residual lies in null(K) and is a
                # zero-curvature descent direction that keeps the working set
                sol = resid_k
                ray = True
        p = np.zeros(n)
        p[free] = sol[:nf]
        lam_w = sol[nf:]
        scale = 1.0 + float(np.max(np.abs(x), initial=0.0))
        if not ray and float(np.max(np.abs(p), initial=0.0)) <= 1e-12 * scale:
            # multipliers at the working-set stationary point
            lam = np.zeros(m)
            lam[rows] = lam_w
            r = grad + A.T @ lam
            nu_lb = np.zeros(n)
            nu_ub = np.zeros(n)
            cand = []
            for j, side in fixed.items():
                if side < 0:
                    nu_lb[j] = r[j]
                    cand.append((nu_lb[j], 0, j))
                else:
                    nu_ub[j] = -r[j]
                    cand.append((nu_ub[j], 0, j))
            for k, i in enumerate(rows):
                cand.append((lam_w[k], 1, i))
            if not cand:
                return x, lam, nu_lb, nu_ub, it, True
            worst = min(cand)
            if worst[0] >= -1e-12 * (1.0 + float(np.max(np.abs(grad), initial=0.0))):
                return x, np.maximum(lam, 0.0), np.maximum(nu_lb, 0.0), np.maximum(nu_ub, 0.0), it, True
            if worst[1] == 0:
                del fixed[worst[2]]
            else:
                rows.remove(worst[2])
            continue
        # ratio test over bounds of free variables and rows outside the working set
        alpha = np.inf if ray else 1.0
        block = None
        pf = p[free]
        xf = x[free]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_up = np.where(pf > 0, (ub[free] - xf) / pf, np.inf)
            t_lo = np.where(pf < 0, (lb[free] - xf) / pf, np.inf)
        if t_up.size:
            k = int(np.argmin(t_up))
            if t_up[k] < alpha:
                alpha, block = max(t_up[k], 0.0), ("ub", int(free[k]))
            k = int(np.argmin(t_lo))
            if t_lo[k] < alpha:
                alpha, block = max(t_lo[k], 0.0), ("lb", int(free[k]))
        if m:
            Ap = A @ p
            resid = b - A @ x
            mask = Ap > 1e-14
            if rows:
                mask[rows] = False
            if np.any(mask):
                ratios = np.full(m, np.inf)
                ratios[mask] = np.maximum(resid[mask], 0.0) / Ap[mask]
                k = int(np.argmin(ratios))
                if ratios[k] < alpha:
                    alpha, block = ratios[k], ("row", k)
        if block is None and ray:
            raise ValueError("QP is unbounded below")
        x = x + alpha * p
        if block is not None:
            kind, j = block
            if kind == "ub":
                x[j] = ub[j]
                fixed[j] = 1
            elif kind == "lb":
                x[j] = lb[j]
                fixed[j] = -1
            else:
                rows.append(j)
    lam = np.zeros(m)
    return x, lam, np.zeros(n), np.zeros(n), it, False


def _initial_working_set(qp: QPSubproblem, x, warm):
    fixed = {}
    for j in range(qp.n):
        if x[j] <= qp.lb[j]:
            fixed[j] = -1
        elif x[j] >= qp.ub[j]:
            fixed[j] = 1
    rows = []
    if warm is not None:
        warm_fixed, warm_rows = warm
        fixed = {j: s for j, s in fixed.items() if warm_fixed.get(j) == s}
        resid = qp.b - qp.A @ x
        rows = [i for i in warm_rows if i < qp.A.shape[0] and abs(resid[i]) <= FEAS_TOL]
    return fixed, rows


def solve_qp(qp: QPSubproblem, x0=None, warm=None, max_iter: int | None = None) -> QPResult:
    """Solve a convex QP by a primal active-set method.

    Args:
        qp: The subproblem; ``H`` must be positive semidefinite.
        x0: Optional starting point. If it is feasible it is used directly;
            otherwise a phase-one LP minimizing the largest row violation
            supplies the start.
        warm: Optional ``(fixed, rows)`` working set from a previous solve;
            only entries active at the starting point are kept.
        max_iter: Iteration cap, default ``10 * (n + rows)``.

    Returns:
        :class:`QPResult` whose status is ``optimal``, ``iteration-capped`` or
        ``infeasible-relaxed`` (no point satisfies the rows; the QP with every
        row relaxed by the smallest uniform amount is solved instead).
    """
    n, m = qp.n, qp.A.shape[0]
    cap = max_iter or 10 * (n + m) + 50
    if np.any(qp.lb > qp.ub):
        raise ValueError("lower bound exceeds upper bound")
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    x = np.clip(x, qp.lb, qp.ub)
    x = np.where(np.isfinite(x), x, 0.0)
    viol = float(np.max(qp.A @ x - qp.b, initial=0.0)) if m else 0.0
    if viol <= FEAS_TOL:
        fixed, rows = _initial_working_set(qp, x, warm)
        x, lam, nu_lb, nu_ub, it, ok = _active_set(qp.H, qp.g, qp.A, qp.b, qp.lb, qp.ub, x, fixed, rows, cap)
        ws = _working_set(x, lam, qp)
        return QPResult(x, lam, nu_lb, nu_ub, "optimal" if ok else "iteration-capped", it, ws)
    return _solve_from_phase_one(qp, cap)


def _working_set(x, lam, qp):
    fixed = {j: (-1 if x[j] <= qp.lb[j] else 1) for j in range(qp.n) if x[j] <= qp.lb[j] or x[j] >= qp.ub[j]}
    rows = tuple(int(i) for i in np.flatnonzero(lam > 0))
    return (fixed, rows)


def _phase_one(qp: QPSubproblem) -> tuple[np.ndarray, float]:
    """Point minimizing the largest row violation ``t`` within the bounds (LP)."""
    n, m = qp.n, qp.A.shape[0]
    c = np.zeros(n + 1)
    c[n] = 1.0
    A_ub = np.hstack([qp.A, -np.ones((m, 1))])
    bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
              for lo, hi in zip(qp.lb, qp.ub)] + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=qp.b, bounds=bounds, method="highs")
    if res.status != 0:
        raise np.linalg.LinAlgError(f"phase-one LP failed: {res.message}")
    x = np.clip(res.x[:n], qp.lb, qp.ub)
    return x, float(max(np.max(qp.A @ x - qp.b, initial=0.0), 0.0))


def _solve_from_phase_one(qp: QPSubproblem, cap: int) -> QPResult:
    x, t = _phase_one(qp)
    b = qp.b
    status = "optimal"
    if t > 1e-9:
        # no feasible point: minimize over the uniformly relaxed rows instead
        b = qp.b + t
        status = "infeasible-relaxed"
    # rows active within round-off at the LP vertex are treated as exactly active
    b_eff = np.maximum(b, qp.A @ x)
    fixed, _ = _initial_working_set(qp, x, None)
    x, lam, nu_lb, nu_ub, it, ok = _active_set(qp.H, qp.g, qp.A, b_eff, qp.lb, qp.ub, x, fixed, [], cap)
    if not ok and status == "optimal":
        status = "iteration-capped"
    return QPResult(x, lam, nu_lb, nu_ub, status, it, _working_set(x, lam, qp))


# -- SQP -------------------------------------------------------------------


@dataclass
class SolveReport:
    status: str
    iterations: int
    kkt: float
    residuals: dict = field(default_factory=dict)
    merit: float = float("nan")
    wall_time: float = 0.0
    qp_iterations: int = 0
    relaxed_qps: int = 0

    def to_dict(self) -> dict:
        return {"status": self.status, "iterations": self.iterations, "kkt": self.kkt,
                "residuals": dict(self.residuals), "merit": self.merit, "wall_time": self.wall_time,
                "qp_iterations": self.qp_iterations, "relaxed_qps": self.relaxed_qps}


def _violation(cons: np.ndarray) -> float:
    return float(np.sum(np.maximum(cons, 0.0)))


class SQPSolver:
    """Gauss-Newton SQP with an l1 merit line search.

    The instance keeps the last QP working set and reuses it as a warm start
    for the next call; use one instance per control loop.

    Args:
        max_iter: SQP iteration cap.
        tol: KKT tolerance for convergence.
        trace: Optional text stream receiving one line per iteration.
        debug: Assert merit monotonicity on every accepted step.
    """

    def __init__(self, max_iter: int = 75, tol: float = 1e-6, trace: TextIO | None = None,
                 debug: bool = False, mu0: float = 1e-8):
        self.max_iter = max_iter
        self.tol = tol
        self.trace = trace
        self.debug = debug
        self.mu0 = mu0
        self.warm = None

    def reset(self) -> None:
        self.warm = None

    def solve(self, ocp, w0, max_iter: int | None = None):
        """Run SQP from ``w0``; returns ``(Solution, SolveReport)``."""
        t_start = time.perf_counter()
        cap = self.max_iter if max_iter is None else max_iter
        w = np.clip(np.asarray(w0, dtype=float), ocp.lb, ocp.ub)
        mu = self.mu0
        penalty = 1.0
        status = "iteration-capped"
        kkt = float("inf")
        residuals: dict = {}
        qp_its = 0
        relaxed = 0
        lin = ocp.linearize(w)
        best = None
        merit = float("nan")
        it = 0
        for it in range(1, cap + 1):
            n = w.size
            qp = QPSubproblem(lin.hess + mu * np.eye(n), lin.grad, lin.jac, -lin.cons,
                              ocp.lb - w, ocp.ub - w)
            res = solve_qp(qp, x0=ocp.qp_start(w, lin.cons), warm=self.warm)
            qp_its += res.iterations
            if res.status == "infeasible-relaxed":
                relaxed += 1
            else:
                self.warm = res.working_set
            d = res.x
            lam = res.lam
            # stationarity of the nonlinear problem with the QP multipliers
            stat = float(np.max(np.abs(qp.H @ d), initial=0.0))
            viol = float(np.max(np.maximum(lin.cons, 0.0), initial=0.0))
            comp = float(np.max(np.abs(lam * lin.cons), initial=0.0))
            step = float(np.max(np.abs(d), initial=0.0))
            kkt = max(stat, viol, comp)
            residuals = {"stationarity": stat, "primal": viol, "complementarity": comp, "step": step}
            penalty = max(penalty, 1.1 * float(np.max(lam, initial=0.0)) + 1e-3)
            merit = lin.cost + penalty * _violation(lin.cons)
            if best is None or merit < best[0]:
                best = (merit, w, lin)
            if kkt <= self.tol:
                status = "converged"
                break
            # Armijo backtracking on the l1 merit
            slope = float(lin.grad @ d) - penalty * _violation(lin.cons)
            alpha = 1.0
            accepted = False
            for _ in range(20):
                w_try = np.clip(w + alpha * d, ocp.lb, ocp.ub)
                c_try, g_try, _ = ocp.evaluate(w_try)
                m_try = c_try + penalty * _violation(g_try)
                if np.isfinite(m_try) and m_try <= merit + 1e-4 * alpha * min(slope, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if self.trace is not None:
                self.trace.write(f"{it} merit={merit:.10e} step={step:.3e} kkt={kkt:.3e} "
                                 f"alpha={alpha if accepted else 0.0:.3e} mu={mu:.1e}\n")
            if not accepted:
                mu = max(mu * 10.0, 1e-6)
                if mu > 1e6:
                    break
                continue
            if self.debug:
                assert m_try <= merit + 1e-9 * (1.0 + abs(merit)), "merit increased"
            # short accepted steps signal an optimistic model: damp harder
            if alpha < 0.5:
                mu = max(mu * 10.0, 1e-4)
            elif alpha == 1.0:
                mu = max(mu / 10.0, self.mu0)
            w = w_try
            lin = ocp.linearize(w)
        else:
            it = cap
        merit_now = lin.cost + penalty * _violation(lin.cons)
        if best is not None and best[0] < merit_now - 1e-12 * (1 + abs(merit_now)) and status != "converged":
            merit_now, w, lin = best
        if status != "converged" and relaxed:
            status = "infeasible-QP-recovered"
        report = SolveReport(status, it, kkt, residuals, float(merit_now),
                             time.perf_counter() - t_start, qp_its, relaxed)
        return ocp.solution(w, status), report


def solve_sqp(ocp, init, max_iter: int = 75, tol: float = 1e-6, trace: TextIO | None = None):
    """One-shot convenience wrapper around :class:`SQPSolver`."""
    return SQPSolver(max_iter=max_iter, tol=tol, trace=trace).solve(ocp, init)
