"""Dense convex QP solver and KKT-based solution differentiation.

Problems have the canonical form

    min  0.5 x'Px + q'x  (+ const)
    s.t. A x = b,  G x <= h

solved by a Mehrotra-style predictor-corrector primal-dual interior-point
method with dense factorizations, optional warm starting from a previous
solution, and an active-set polish step that sharpens the returned point to
near machine precision on nondegenerate problems. The smooth central-path
solutions make the KKT system well suited to implicit differentiation, which
``solution_data_vjp`` implements.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    layout: object = None  # optional variable-layout descriptor
    const: float = 0.0     # objective offset, reporting only

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        n = self.q.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(self.A.shape[0])
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=float).reshape(self.G.shape[0])
        if self.P.shape != (n, n):
            raise ValueError(f"P must be ({n},{n}), got {self.P.shape}")

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def n_eq(self):
        return self.b.shape[0]

    @property
    def n_ineq(self):
        return self.h.shape[0]

    def check_symmetric(self, tol=1e-10):
        scalev = max(1.0, np.abs(self.P).max()) if self.P.size else 1.0
        return np.abs(self.P - self.P.T).max() <= tol * scalev if self.P.size else True

    def check_psd(self, shift=1e-10) -> bool:
        """Cholesky-with-shift test for positive semidefiniteness."""
        if self.n == 0:
            return True
        scalev = max(1.0, np.abs(self.P).max())
        try:
            np.linalg.cholesky(self.P + shift * scalev * np.eye(self.n))
            return True
        except np.linalg.LinAlgError:
            return False

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)


@dataclass
class QpSolution:
    x: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    s: np.ndarray
    obj: float
    status: str              # optimal | max_iter | infeasible | failed
    iterations: int
    residuals: dict = field(default_factory=dict)
    degenerate: bool = False
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residuals(prob: QpProblem, x, nu, lam, s) -> dict:
    """The four KKT residual families, as infinity norms."""
    r_stat = prob.P @ x + prob.q + prob.A.T @ nu + prob.G.T @ lam
    r_eq = prob.A @ x - prob.b
    r_in = prob.G @ x + s - prob.h
    comp = lam * s
    inf = lambda v: float(np.abs(v).max()) if v.size else 0.0
    return {
        "stationarity": inf(r_stat),
        "primal_eq": inf(r_eq),
        "primal_ineq": inf(r_in),
        "dual_feas": float(max(0.0, -(lam.min() if lam.size else 0.0))),
        "complementarity": inf(comp),
    }


def _solve_kkt_factory(m_mat, a_eq, reg, reg_eq: float = 1e-13):
    """LU factorization of the regularized reduced KKT matrix, refined
    against the unregularized system.

    ``reg`` must be chosen from static problem data; tying it to the scaled
    diagonal (which grows without bound as the barrier vanishes) perturbs
    the equality rows beyond what refinement can recover.
    """
    n = m_mat.shape[0]
    p = a_eq.shape[0]
    k_reg = np.zeros((n + p, n + p))
    k_reg[:n, :n] = m_mat
    k_reg[:n, :n] += reg * np.eye(n)
    if p:
        k_reg[:n, n:] = a_eq.T
        k_reg[n:, :n] = a_eq
        k_reg[n:, n:] = -reg_eq * np.eye(p)
    lu, piv = sla.lu_factor(k_reg, check_finite=False)

    def apply_true(w):
        out = np.empty(n + p)
        out[:n] = m_mat @ w[:n] + (a_eq.T @ w[n:] if p else 0.0)
        if p:
            out[n:] = a_eq @ w[:n]
        return out

    def solve(rhs):
        w = sla.lu_solve((lu, piv), rhs, check_finite=False)
        scale = float(np.abs(rhs).max()) + 1e-30
        for _ in range(3):
            r = rhs - apply_true(w)
            if np.abs(r).max() <= 1e-13 * scale:
                break
            w += sla.lu_solve((lu, piv), r, check_finite=False)
        return w

    return solve


def _equality_only_solve(prob: QpProblem, tol):
    n, p = prob.n, prob.n_eq
    k = np.zeros((n + p, n + p))
    k[:n, :n] = prob.P + 1e-12 * np.eye(n)
    if p:
        k[:n, n:] = prob.A.T
        k[n:, :n] = prob.A
    rhs = np.concatenate([-prob.q, prob.b])
    try:
        w = np.linalg.solve(k, rhs)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(k, rhs, rcond=None)[0]
    x, nu = w[:n], w[n:]
    res = kkt_residuals(prob, x, nu, np.zeros(0), np.zeros(0))
    status = "optimal" if max(res.values()) <= tol else "failed"
    return QpSolution(x, nu, np.zeros(0), np.zeros(0), prob.objective(x),
                      status, 1, res)


def solve_qp(prob: QpProblem, tol: float = 1e-8, max_iter: int = 60,
             warm=None, polish: bool = True, classify: bool = True) -> QpSolution:
    """Interior-point solve to absolute KKT residuals <= tol.

    ``warm`` is an optional (x, nu, lam, s) tuple from a related solve.
    ``classify`` enables the phase-1 feasibility check on failed solves;
    it is disabled internally when the check solves its own subproblem.
    """
    t0 = time.perf_counter()
    if not np.all(np.isfinite(prob.q)) or not np.all(np.isfinite(prob.h)):
        raise ValueError("problem data contains non-finite entries")
    n, p, m = prob.n, prob.n_eq, prob.n_ineq
    if m == 0:
        sol = _equality_only_solve(prob, tol)
        sol.solve_time = time.perf_counter() - t0
        return sol

    P, q, A, b, G, h = prob.P, prob.q, prob.A, prob.b, prob.G, prob.h
    data_scale = max(float(np.abs(P).max()) if P.size else 0.0,
                     float(np.abs(G).max()) if G.size else 0.0, 1.0)
    reg_static = 1e-11 * data_scale

    if warm is not None:
        x = np.array(warm[0], dtype=float)
        nu = np.array(warm[1], dtype=float) if p else np.zeros(0)
        lam = np.maximum(np.array(warm[2], dtype=float), 1e-2)
        s = np.maximum(np.array(warm[3], dtype=float), 1e-2)
    else:
        # least-squares start treating the inequalities as a quadratic
        # penalty; both s and lam come from the constraint residual, shifted
        # uniformly into the positive orthant
        solve0 = _solve_kkt_factory(P + G.T @ G, A, reg_static + 1e-12)
        w = solve0(np.concatenate([-q + G.T @ h, b]))
        x, nu = w[:n], w[n:]
        z = G @ x - h
        s = -z + max(0.0, 0.1 - float((-z).min()))
        lam = z + max(0.0, 0.1 - float(z.min()))

    status = "max_iter"
    it = 0
    mu = 1.0
    best = None  # (worst, x, nu, lam, s) — iterate to fall back to
    stall = 0
    for it in range(1, max_iter + 1):
        r_d = P @ x + q + (A.T @ nu if p else 0.0) + G.T @ lam
        r_p = A @ x - b if p else np.zeros(0)
        r_g = G @ x + s - h
        comp = s * lam
        mu = comp.mean()
        worst = max(np.abs(r_d).max(), np.abs(r_p).max() if p else 0.0,
                    np.abs(r_g).max(), comp.max())
        if best is None or worst < 0.9 * best[0]:
            stall = 0
        else:
            stall += 1
        if best is None or worst < best[0]:
            best = (worst, x.copy(), nu.copy(), lam.copy(), s.copy())
        if worst <= tol:
            status = "optimal"
            break
        if not np.isfinite(worst):
            status = "failed"
            break
        # complementarity at the round-off floor: further centering steps
        # only amplify the ill-conditioning of the scaled system
        if (mu < 1e-13 and stall >= 2) or (mu < 1e-10 and stall >= 10) \
                or stall >= 25:
            break

        d = lam / np.maximum(s, 1e-14)
        m_mat = P + (G.T * d) @ G
        try:
            kkt_solve = _solve_kkt_factory(m_mat, A, reg_static)
        except (np.linalg.LinAlgError, ValueError):
            status = "failed"
            break

        def direction(r_c):
            rhs = np.concatenate(
                [-r_d + G.T @ (r_c / np.maximum(s, 1e-14) - d * r_g), -r_p])
            w = kkt_solve(rhs)
            dx = w[:n]
            dnu = w[n:]
            ds = -r_g - G @ dx
            dlam = -r_c / np.maximum(s, 1e-14) - d * ds
            return dx, dnu, ds, dlam

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor
        dx_a, dnu_a, ds_a, dlam_a = direction(comp)
        alpha_aff = min(max_step(s, ds_a), max_step(lam, dlam_a))
        mu_aff = ((s + alpha_aff * ds_a) @ (lam + alpha_aff * dlam_a)) / m
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

        # corrector (same factorization)
        r_c = comp + ds_a * dlam_a - sigma * mu
        dx, dnu, ds, dlam = direction(r_c)
        alpha = 0.995 * min(max_step(s, ds), max_step(lam, dlam))
        alpha = min(1.0, alpha)
        x = x + alpha * dx
        if p:
            nu = nu + alpha * dnu
        s = s + alpha * ds
        lam = lam + alpha * dlam

    if status != "optimal" and best is not None:
        _, x, nu, lam, s = best
    res = kkt_residuals(prob, x, nu, lam, s)
    sol = QpSolution(x, nu, lam, s, prob.objective(x), status, it, res)
    if polish and status != "failed":
        _polish(prob, sol, tol)
    if sol.status != "optimal" and max(sol.residuals.values()) <= tol:
        sol.status = "optimal"
    if sol.status == "max_iter" and max(sol.residuals.values()) > 1e-5:
        if mu < 1e-10:
            # complementarity collapsed yet feasibility never materialized
            sol.status = "infeasible"
        elif classify:
            # contradictory constraints can also stall with mu bounded away
            # from zero; certify by minimising the worst violation directly
            t_star = _phase1_min_violation(prob)
            if t_star is not None and \
                    t_star > 1e-6 * (1.0 + _rhs_scale(prob)):
                sol.status = "infeasible"
    sol.degenerate = _weakly_active(sol)
    sol.solve_time = time.perf_counter() - t0
    return sol


def _weakly_active(sol: QpSolution, thresh: float = 1e-6) -> bool:
    if sol.s.size == 0:
        return False
    return bool(np.any((sol.s < thresh) & (sol.lam < thresh)))


def _rhs_scale(prob: QpProblem) -> float:
    parts = [float(np.abs(prob.h).max()) if prob.h.size else 0.0,
             float(np.abs(prob.b).max()) if prob.b.size else 0.0]
    return max(parts)


def _phase1_min_violation(prob: QpProblem):
    """Smallest worst-case constraint violation, or None if undetermined.

    Solves min t over (x, t) subject to Gx - h <= t and |Ax - b| <= t,
    with t >= -1 keeping the program bounded.  The feasible set always has
    interior (take t large), so a positive optimum certifies that the
    original constraints are contradictory.
    """
    n, p, m = prob.n, prob.n_eq, prob.n_ineq
    rows = m + 2 * p + 1
    g1 = np.zeros((rows, n + 1))
    h1 = np.zeros(rows)
    g1[:m, :n] = prob.G
    h1[:m] = prob.h
    if p:
        g1[m:m + p, :n] = prob.A
        h1[m:m + p] = prob.b
        g1[m + p:m + 2 * p, :n] = -prob.A
        h1[m + p:m + 2 * p] = -prob.b
    g1[:-1, n] = -1.0
    g1[-1, n] = -1.0
    h1[-1] = 1.0
    # tiny curvature keeps the optimal face bounded without moving the value
    p1 = QpProblem(1e-8 * np.eye(n + 1), np.r_[np.zeros(n), 1.0],
                   np.zeros((0, n + 1)), np.zeros(0), g1, h1)
    sol = solve_qp(p1, tol=1e-8, max_iter=60, classify=False)
    if not sol.ok:
        return None
    return float(sol.x[n])


def _active_set_solve(prob: QpProblem, active):
    """Equality-constrained KKT solve treating ``active`` rows of G as tight."""
    n, p = prob.n, prob.n_eq
    na = int(active.sum())
    g_act = prob.G[active]
    k = np.zeros((n + p + na, n + p + na))
    k[:n, :n] = prob.P
    if p:
        k[:n, n:n + p] = prob.A.T
        k[n:n + p, :n] = prob.A
    if na:
        k[:n, n + p:] = g_act.T
        k[n + p:, :n] = g_act
    rhs = np.concatenate([-prob.q, prob.b, prob.h[active]])
    try:
        w = np.linalg.solve(k, rhs)
        if not np.all(np.isfinite(w)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        w, *_ = np.linalg.lstsq(k, rhs, rcond=None)
    x = w[:n]
    nu = w[n:n + p]
    lam = np.zeros(prob.n_ineq)
    lam[active] = w[n + p:]
    s = prob.h - prob.G @ x
    return x, nu, lam, s


def _polish(prob: QpProblem, sol: QpSolution, tol: float,
            max_rounds: int = 30) -> None:
    """Sharpen the solution with a few active-set refinement rounds seeded by
    the interior-point iterate; keep the result only if the KKT residuals do
    not get worse."""
    feas_scale = 1e-9 * (1.0 + np.abs(prob.h))
    active = sol.lam > sol.s
    try:
        for _ in range(max_rounds):
            x, nu, lam, s = _active_set_solve(prob, active)
            neg = active & (lam < -1e-9)
            if np.any(neg):
                # wrong guess: release the most negative multiplier
                worst_i = np.argmin(np.where(neg, lam, 0.0))
                active[worst_i] = False
                continue
            viol = ~active & (s < -feas_scale)
            if np.any(viol):
                worst_i = np.argmin(np.where(viol, s, 0.0))
                active[worst_i] = True
                continue
            break
        else:
            return
    except np.linalg.LinAlgError:
        return
    if np.any(lam < -1e-9) or np.any(s < -feas_scale):
        return
    lam = np.maximum(lam, 0.0)
    s = np.maximum(s, 0.0)
    res = kkt_residuals(prob, x, nu, lam, s)
    if max(res.values()) <= max(tol, max(sol.residuals.values())):
        sol.x, sol.nu, sol.lam, sol.s = x, nu, lam, s
        sol.obj = prob.objective(x)
        sol.residuals = res


def solution_data_vjp(prob: QpProblem, sol: QpSolution, dl_dx,
                      reg: float = 1e-8, pin_rows=None) -> dict:
    """Gradients of a scalar loss with respect to every problem-data entry.

    Implicitly differentiates the KKT system at the solution; ``dl_dx`` is
    the loss gradient with respect to the primal optimum. The solution map
    is only piecewise differentiable; at weakly active constraints the
    system is regularized and the returned dict carries ``degenerate=True``.

    ``pin_rows`` lists inequality rows known to stay tight under data
    perturbations even when their multiplier vanishes (epigraph lower
    bounds pinned by objective curvature); weak activity there is resolved
    as "constraint remains tight" instead of being reported as degenerate.
    """
    if not sol.ok:
        raise ValueError("cannot differentiate a non-optimal solution")
    n, p, m = prob.n, prob.n_eq, prob.n_ineq
    x, nu, lam = sol.x, sol.nu, sol.lam
    dl_dx = np.asarray(dl_dx, dtype=float).reshape(n)

    weak = (sol.s < 1e-6) & (lam < 1e-6) if m else np.zeros(0, dtype=bool)
    pinned = np.zeros(m, dtype=bool)
    if pin_rows is not None and m:
        pinned[np.asarray(pin_rows, dtype=int)] = True
    pin_weak = weak & pinned

    # Jacobian of the KKT map F(x, lam, nu) with complementarity written as
    # diag(lam) (Gx - h) = 0
    dim = n + m + p
    jac = np.zeros((dim, dim))
    jac[:n, :n] = prob.P
    if m:
        jac[:n, n:n + m] = prob.G.T
        jac[n:n + m, :n] = lam[:, None] * prob.G
        jac[n:n + m, n:n + m] = np.diag(prob.G @ x - prob.h)
        if np.any(pin_weak):
            jac[np.flatnonzero(pin_weak) + n, :n] = prob.G[pin_weak]
            jac[np.flatnonzero(pin_weak) + n, n:] = 0.0
    if p:
        jac[:n, n + m:] = prob.A.T
        jac[n + m:, :n] = prob.A
    rhs = np.zeros(dim)
    rhs[:n] = dl_dx

    degenerate = bool(np.any(weak & ~pinned))
    try:
        w = np.linalg.solve(jac.T, rhs)
        if not np.all(np.isfinite(w)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        degenerate = True
        w = np.linalg.solve(jac.T + reg * np.eye(dim), rhs)
    w_x = w[:n]
    w_l = w[n:n + m]
    w_n = w[n + m:]

    # complementarity rows carry a lam scaling that the pinned rows lack
    lam_wl = lam * w_l
    if np.any(pin_weak):
        lam_wl[pin_weak] = w_l[pin_weak]

    grads = {
        "P": -0.5 * (np.outer(w_x, x) + np.outer(x, w_x)),
        "q": -w_x,
        "A": -(np.outer(nu, w_x) + np.outer(w_n, x)) if p else np.zeros((0, n)),
        "b": w_n.copy(),
        "G": -(np.outer(lam, w_x) + np.outer(lam_wl, x)) if m else np.zeros((0, n)),
        "h": lam_wl,
        "degenerate": degenerate,
    }
    return grads


def dump_problem(path, prob: QpProblem) -> None:
    """Text serialization in the stable field order P, q, A, b, G, h."""
    with open(path, "w") as f:
        f.write("koopmpc-qp 1\n")
        for name in ("P", "q", "A", "b", "G", "h"):
            arr = np.atleast_2d(getattr(prob, name))
            f.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for rowv in arr:
                f.write(" ".join(f"{v:.17g}" for v in rowv) + "\n")
        f.write(f"const {prob.const:.17g}\n")


def load_problem(path) -> QpProblem:
    with open(path) as f:
        header = f.readline().split()
        if header[:2] != ["koopmpc-qp", "1"]:
            raise ValueError("not a koopmpc QP dump (or unsupported version)")
        fields = {}
        const = 0.0
        line = f.readline()
        while line:
            parts = line.split()
            if parts[0] == "const":
                const = float(parts[1])
                break
            name, rows, cols = parts[0], int(parts[1]), int(parts[2])
            data = [[float(v) for v in f.readline().split()] for _ in range(rows)]
            fields[name] = np.array(data, dtype=float).reshape(rows, cols)
            line = f.readline()
    q = fields["q"].ravel()
    return QpProblem(fields["P"], q, fields["A"], fields["b"].ravel(),
                     fields["G"], fields["h"].ravel(), const=const)
