"""Active-set QP and SQP loop against dense KKT oracles."""

import io
import itertools
from types import SimpleNamespace

import cvxpy as cp
import numpy as np
import pytest
from numpy.testing import assert_allclose

from gpmpcc.mpcc import Linearization
from gpmpcc.solver import QPSubproblem, SQPSolver, kkt_residuals, solve_qp, solve_sqp


def objective(qp, x):
    return 0.5 * x @ qp.H @ x + qp.g @ x


def enumerate_qp(qp):
    """Brute-force optimum over all active sets of at most ``n`` constraints."""
    n = qp.n
    rows = [(qp.A[i], qp.b[i]) for i in range(qp.A.shape[0])]
    rows += [(-np.eye(n)[j], -qp.lb[j]) for j in range(n) if np.isfinite(qp.lb[j])]
    rows += [(np.eye(n)[j], qp.ub[j]) for j in range(n) if np.isfinite(qp.ub[j])]
    G = np.array([r[0] for r in rows]).reshape(-1, n)
    h = np.array([r[1] for r in rows])
    best = None
    for k in range(min(n, len(rows)) + 1):
        for S in itertools.combinations(range(len(rows)), k):
            S = list(S)
            K = np.block([[qp.H, G[S].T], [G[S], np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-qp.g, h[S]]))
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.all(G @ x - h <= 1e-9) and np.all(lam >= -1e-9):
                f = objective(qp, x)
                if best is None or f < best[0]:
                    best = (f, x)
    return best[1]


def random_qp(rng):
    n = int(rng.integers(2, 5))
    m = int(rng.integers(1, 4))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    xf = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = A @ xf + rng.uniform(0.0, 1.0, m)
    lb = xf - rng.uniform(0.1, 1.0, n)
    ub = xf + rng.uniform(0.1, 1.0, n)
    lb[rng.uniform(size=n) < 0.3] = -np.inf
    ub[rng.uniform(size=n) < 0.3] = np.inf
    g = 5.0 * rng.normal(size=n)
    return QPSubproblem(H, g, A, b, lb, ub)


def assert_kkt(qp, res, tol=1e-8):
    r = kkt_residuals(qp, res)
    assert r["stationarity"] <= tol and r["primal"] <= tol and r["complementarity"] <= tol and r["dual"] <= tol, r


# -- QP ---------------------------------------------------------------------

def test_unconstrained_newton_step():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(5, 5))
    H = M @ M.T + np.eye(5)
    g = rng.normal(size=5)
    qp = QPSubproblem(H, g, np.zeros((0, 5)), np.zeros(0), np.full(5, -np.inf), np.full(5, np.inf))
    res = solve_qp(qp)
    assert res.status == "optimal"
    assert_allclose(res.x, -np.linalg.solve(H, g), atol=1e-12)


def test_bound_clamp_multiplier_sign():
    # min 0.5 (x - 2)^2 on [-1, 1]: clamps to 1 with an upper-bound multiplier of 1
    qp = QPSubproblem(np.eye(1), np.array([-2.0]), np.zeros((0, 1)), np.zeros(0), np.array([-1.0]), np.array([1.0]))
    res = solve_qp(qp)
    assert res.x[0] == 1.0
    assert res.nu_ub[0] == pytest.approx(1.0) and res.nu_lb[0] == 0.0
    qp = QPSubproblem(np.eye(1), np.array([3.0]), np.zeros((0, 1)), np.zeros(0), np.array([-1.0]), np.array([1.0]))
    res = solve_qp(qp)
    assert res.x[0] == -1.0 and res.nu_lb[0] == pytest.approx(2.0)


def test_random_qps_match_enumeration_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        qp = random_qp(rng)
        res = solve_qp(qp)
        assert res.status == "optimal"
        assert_kkt(qp, res)
        assert_allclose(res.x, enumerate_qp(qp), atol=1e-6)


def test_twenty_variable_qp_with_ten_active_rows():
    rng = np.random.default_rng(2)
    n, m = 20, 16
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    x_star = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    lam = np.zeros(m)
    lam[:10] = rng.uniform(0.5, 2.0, 10)
    b = A @ x_star
    b[10:] += rng.uniform(0.5, 1.0, m - 10)
    # KKT holds at x_star by construction, so it is the unique optimum
    g = -H @ x_star - A.T @ lam
    qp = QPSubproblem(H, g, A, b, np.full(n, -np.inf), np.full(n, np.inf))
    res = solve_qp(qp)
    assert_kkt(qp, res)
    assert_allclose(res.x, x_star, atol=1e-6)
    assert_allclose(res.lam, lam, atol=1e-6)
    assert sorted(res.working_set[1]) == list(range(10))


def test_infeasible_rows_are_relaxed():
    # x <= -1 and -x <= -1 cannot both hold
    qp = QPSubproblem(np.eye(1), np.zeros(1), np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]),
                      np.array([-5.0]), np.array([5.0]))
    res = solve_qp(qp)
    assert res.status == "infeasible-relaxed"
    assert res.x[0] == pytest.approx(0.0, abs=1e-12)


def test_infeasible_start_and_warm_start_agree():
    rng = np.random.default_rng(3)
    for _ in range(30):
        qp = random_qp(rng)
        cold = solve_qp(qp, x0=np.full(qp.n, 50.0))
        warm = solve_qp(qp, warm=cold.working_set)
        assert_kkt(qp, cold)
        assert_kkt(qp, warm)
        assert_allclose(warm.x, cold.x, atol=1e-9)


def test_singular_hessian_bounded_by_constraints():
    H = np.diag([1.0, 0.0])
    qp = QPSubproblem(H, np.array([0.0, -1.0]), np.array([[1.0, 1.0]]), np.array([2.0]),
                      np.array([-1.0, -1.0]), np.array([1.0, 3.0]))
    res = solve_qp(qp)
    assert_kkt(qp, res)
    x = cp.Variable(2)
    prob = cp.Problem(cp.Minimize(0.5 * cp.square(x[0]) - x[1]), [x[0] + x[1] <= 2, x >= -1, x <= [1, 3]])
    prob.solve()
    assert objective(qp, res.x) == pytest.approx(prob.value, abs=1e-6)


def test_qp_validation():
    with pytest.raises(ValueError):
        QPSubproblem(np.eye(2), np.zeros(3), np.zeros((0, 3)), np.zeros(0), np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        QPSubproblem(np.eye(2), np.zeros(2), np.array([[np.inf, 0.0]]), np.zeros(1), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        solve_qp(QPSubproblem(np.eye(1), np.zeros(1), np.zeros((0, 1)), np.zeros(0), np.ones(1), np.zeros(1)))


# -- SQP --------------------------------------------------------------------

class LinearToyOCP:
    """Linear dynamics ``x+ = A x + B u`` with quadratic tracking cost and state bounds.

    The decision vector is the input sequence. States are eliminated, so the
    problem is a convex QP in ``w``.
    """

    def __init__(self, N=8, seed=0):
        rng = np.random.default_rng(seed)
        self.N = N
        A = np.array([[1.0, 0.1], [0.0, 1.0]])
        B = np.array([[0.005], [0.1]])
        x0 = np.array([0.0, 1.0])
        # x_i = F_i x0 + G_i w
        F = [np.eye(2)]
        G = [np.zeros((2, N))]
        for i in range(N):
            F.append(A @ F[-1])
            Gi = A @ G[-1]
            Gi[:, i] += B[:, 0]
            G.append(Gi)
        self.F = np.array(F[1:])
        self.G = np.array(G[1:])
        self.x0 = x0
        self.target = np.column_stack([np.linspace(0.1, 1.0, N), np.zeros(N)])
        self.r = 0.01
        # position must stay below 0.6 and speed above -0.5
        self.lb = np.full(N, -3.0)
        self.ub = np.full(N, 3.0)
        self.lb[0] = -rng.uniform(0.5, 1.0)

    def states(self, w):
        return self.F @ self.x0 + self.G @ w

    def evaluate(self, w):
        xs = self.states(w)
        e = xs - self.target
        cost = float(np.sum(e * e) + self.r * w @ w)
        cons = np.concatenate([xs[:, 0] - 0.6, -xs[:, 1] - 0.5])
        return cost, cons, xs

    def linearize(self, w):
        cost, cons, xs = self.evaluate(w)
        Gs = self.G.reshape(-1, self.N)
        e = (xs - self.target).ravel()
        grad = 2.0 * Gs.T @ e + 2.0 * self.r * w
        hess = 2.0 * Gs.T @ Gs + 2.0 * self.r * np.eye(self.N)
        jac = np.vstack([self.G[:, 0, :], -self.G[:, 1, :]])
        return Linearization(np.asarray(w, dtype=float), cost, grad, hess, cons, jac, xs)

    def qp_start(self, w, cons):
        return np.zeros(self.N)

    def solution(self, w, status):
        cost, _, xs = self.evaluate(w)
        return SimpleNamespace(w=np.asarray(w, dtype=float).copy(), cost=cost, status=status, states=xs)

    def convex_optimum(self):
        """cvxpy solve polished by a dense KKT solve on the identified active set."""
        w = cp.Variable(self.N)
        xs = self.F @ self.x0 + sum(self.G[:, :, j] * w[j] for j in range(self.N))
        cost = cp.sum_squares(xs - self.target) + self.r * cp.sum_squares(w)
        prob = cp.Problem(cp.Minimize(cost), [xs[:, 0] <= 0.6, -xs[:, 1] <= 0.5, w >= self.lb, w <= self.ub])
        prob.solve()
        w0 = np.asarray(w.value)
        lin = self.linearize(w0)
        G = np.vstack([lin.jac, -np.eye(self.N), np.eye(self.N)])
        h = np.concatenate([lin.jac @ w0 - lin.cons, -self.lb, self.ub])
        active = np.flatnonzero(np.abs(G @ w0 - h) <= 1e-6)
        H = lin.hess
        q = lin.grad - H @ w0
        k = active.size
        K = np.block([[H, G[active].T], [G[active], np.zeros((k, k))]])
        sol = np.linalg.solve(K, np.concatenate([-q, h[active]]))
        return sol[:self.N], k


def test_sqp_matches_convex_optimum_on_linear_toy():
    for seed in range(5):
        ocp = LinearToyOCP(seed=seed)
        w_star, n_active = ocp.convex_optimum()
        assert n_active > 0  # the state bounds matter
        sol, report = SQPSolver().solve(ocp, np.zeros(ocp.N))
        assert report.status == "converged"
        assert_allclose(sol.w, w_star, atol=1e-6)


def test_warm_start_at_optimum_converges_fast():
    ocp = LinearToyOCP()
    sol, _ = SQPSolver().solve(ocp, np.zeros(ocp.N))
    again, report = SQPSolver().solve(ocp, sol.w)
    assert report.status == "converged" and report.iterations <= 2
    assert_allclose(again.w, sol.w, atol=1e-9)


def test_iteration_cap_contract():
    ocp = LinearToyOCP()
    sol, report = solve_sqp(ocp, np.full(ocp.N, 2.0), max_iter=1)
    assert report.iterations == 1
    assert report.status in {"converged", "iteration-capped"}
    assert set(report.residuals) >= {"stationarity", "primal", "complementarity"}
    assert np.all(sol.w >= ocp.lb) and np.all(sol.w <= ocp.ub)
    assert np.isfinite(report.merit)


def test_trace_and_report_determinism():
    ocp = LinearToyOCP(seed=3)
    runs = []
    for _ in range(2):
        buf = io.StringIO()
        sol, report = SQPSolver(trace=buf, debug=True).solve(ocp, np.full(ocp.N, 1.5))
        d = report.to_dict()
        d.pop("wall_time")
        runs.append((sol.w.tobytes(), d, buf.getvalue()))
    assert runs[0] == runs[1]
    assert runs[0][2].count("\n") >= 1 and "merit=" in runs[0][2]


def test_merit_monotone_on_contouring_ocp(demo_track, params):
    from test_mpcc import make_ocp

    ocp = make_ocp(demo_track, params, speed=2.0)
    buf = io.StringIO()
    sol, report = SQPSolver(trace=buf, debug=True).solve(ocp, ocp.initial_guess(None))
    merits = [float(line.split("merit=")[1].split()[0]) for line in buf.getvalue().splitlines()]
    accepted = [m for m, line in zip(merits, buf.getvalue().splitlines()) if "alpha=0.000e+00" not in line]
    assert all(b <= a + 1e-9 * (1 + abs(a)) for a, b in zip(accepted, accepted[1:]))
    assert report.status == "converged"


def test_unbounded_qp_raises():
    qp = QPSubproblem(np.zeros((1, 1)), np.array([-1.0]), np.zeros((0, 1)), np.zeros(0),
                      np.array([0.0]), np.array([np.inf]))
    with pytest.raises(ValueError, match="unbounded"):
        solve_qp(qp)
