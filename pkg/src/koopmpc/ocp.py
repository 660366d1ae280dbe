"""Economic optimal control problem over a coarse-step Koopman model.

Builds the receding-horizon scheduling problem as a convex QP: latent
dynamics as equality constraints, storage as an explicit integrator fed by
the product-rate output channel, electricity cost as a linear stage
objective, and path constraints either as hard boxes or as slack equalities
with a quadratically smoothed hinge penalty

    L(s, delta) = M * max(0, |s| - half_gap + delta)**2

encoded exactly through epigraph variables. The assembly routine runs both
on plain arrays (for control) and on tape variables (for parameter
gradients): every model-dependent entry of (q, A_eq, b_eq, G) is placed via
the autodiff ops so that QP-data gradients chain back to the model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import koopman
from . import qp as qpmod
from .scaling import PlantScaler


def smoothed_hinge(s, half_gap, delta, m_penalty):
    """Reference penalty M*max(0, |s| - half_gap + delta)^2 (vectorized)."""
    excess = np.maximum(0.0, np.abs(s) - half_gap + delta)
    return m_penalty * excess ** 2


@dataclass
class OcpConfig:
    scaler: PlantScaler
    horizon: int = 36
    dt_minutes: float = 15.0
    m_penalty: float = 1e4
    delta: float = 0.2
    demand_rate: float = 1.0          # product draw, storage units per hour
    ns_lo: float = 0.0
    ns_hi: float = 6.0
    solver_tol: float = 1e-8
    solver_max_iter: int = 60

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt_minutes <= 0:
            raise ValueError("dt_minutes must be positive")
        if self.m_penalty <= 0:
            raise ValueError("m_penalty must be positive")
        if self.ns_hi <= self.ns_lo:
            raise ValueError("storage bounds must satisfy lo < hi")
        # delta must leave a nonempty unpenalized band in every channel
        if not 0.0 <= self.delta < min(1.0, self.ns_half):
            raise ValueError("delta must lie in [0, min half-gap)")

    @property
    def dt_hours(self) -> float:
        return self.dt_minutes / 60.0

    @property
    def ns_mid(self) -> float:
        return 0.5 * (self.ns_lo + self.ns_hi)

    @property
    def ns_half(self) -> float:
        return 0.5 * (self.ns_hi - self.ns_lo)

    @property
    def half_gaps(self) -> np.ndarray:
        """Half constraint widths per soft channel (scaled states, then N_s)."""
        return np.array([1.0] * self.scaler.n_pred + [self.ns_half])


@dataclass
class OcpLayout:
    """Variable/row indexing for one built problem.

    Variable order: z_1..z_N, u_0..u_{N-1}, ns_1..ns_N, then in slack mode
    the slack and epigraph blocks s_1..s_N, t_1..t_N (n_soft entries each).
    """
    horizon: int
    n_z: int
    n_u: int
    n_soft: int
    mode: str

    def __post_init__(self):
        n = self.horizon
        self.z_off = 0
        self.u_off = n * self.n_z
        self.ns_off = self.u_off + n * self.n_u
        if self.mode == "slack_penalty":
            self.s_off = self.ns_off + n
            self.t_off = self.s_off + n * self.n_soft
            self.n_var = self.t_off + n * self.n_soft
        else:
            self.s_off = self.t_off = -1
            self.n_var = self.ns_off + n
        self.dyn_row = 0
        self.storage_row = n * self.n_z
        self.slack_row = self.storage_row + n
        self.n_eq = self.slack_row + (n * self.n_soft
                                      if self.mode == "slack_penalty" else 0)
        self.input_row = 0
        self.path_row = 2 * self.n_u * n
        per_step = 3 * self.n_soft if self.mode == "slack_penalty" \
            else 2 * self.n_soft
        self.n_ineq = self.path_row + n * per_step

    def z_sl(self, t):
        """Latent state block, t in 1..N."""
        i = self.z_off + (t - 1) * self.n_z
        return slice(i, i + self.n_z)

    def u_sl(self, t):
        """Input block, t in 0..N-1."""
        i = self.u_off + t * self.n_u
        return slice(i, i + self.n_u)

    def ns_idx(self, t):
        """Storage holdup variable, t in 1..N."""
        return self.ns_off + (t - 1)

    def s_sl(self, t):
        i = self.s_off + (t - 1) * self.n_soft
        return slice(i, i + self.n_soft)

    def t_sl(self, t):
        i = self.t_off + (t - 1) * self.n_soft
        return slice(i, i + self.n_soft)

    def t_nonneg_rows(self) -> np.ndarray:
        """Inequality rows of the epigraph lower bounds t >= 0.

        These stay tight with zero multiplier whenever the soft constraint
        sits inside its band (the quadratic penalty pins t at zero), so
        derivative code must treat them as structurally active.
        """
        if self.mode != "slack_penalty":
            return np.zeros(0, dtype=int)
        k = np.arange(self.horizon * self.n_soft)
        return self.path_row + 3 * k


def _val(x):
    return x.value if isinstance(x, ad.Var) else np.asarray(x)


def _assemble(params, dims, z0, ns0, prices, cfg: OcpConfig, mode):
    """Shared QP assembly; ``params`` has attributes A..E that are either
    arrays (control path) or tape variables (gradient path), ``z0``
    likewise. Returns (P, q, A_eq, b, G, h, const, layout)."""
    n = cfg.horizon
    n_z, n_u = dims.n_z, dims.n_u
    n_soft = dims.n_x_pred + 1
    lay = OcpLayout(n, n_z, n_u, n_soft, mode)
    sc = cfg.scaler
    dt_h = cfg.dt_hours
    e_half = sc.y.half[0]
    e_mid = sc.y.mid[0]
    nprod_half = sc.y.half[1]
    nprod_mid = sc.y.mid[1]

    prices = np.asarray(prices, dtype=float).reshape(-1)
    if prices.shape[0] != n:
        raise ValueError(f"price forecast must have length {n}, "
                         f"got {prices.shape[0]}")
    if not np.all(np.isfinite(prices)):
        raise ValueError("price forecast contains non-finite entries")

    # ---- constant pieces -------------------------------------------------
    p_mat = np.zeros((lay.n_var, lay.n_var))
    if mode == "slack_penalty":
        for t in range(1, n + 1):
            sl = lay.t_sl(t)
            p_mat[sl, sl] = 2.0 * cfg.m_penalty * np.eye(n_soft)

    h_vec = np.zeros(lay.n_ineq)
    g_base = np.zeros((lay.n_ineq, lay.n_var))
    for t in range(n):
        r = lay.input_row + 2 * n_u * t
        usl = lay.u_sl(t)
        g_base[r:r + n_u, usl] = np.eye(n_u)
        h_vec[r:r + n_u] = 1.0
        g_base[r + n_u:r + 2 * n_u, usl] = -np.eye(n_u)
        h_vec[r + n_u:r + 2 * n_u] = 1.0

    half_gaps = cfg.half_gaps
    g_placements = []
    if mode == "slack_penalty":
        c_soft = half_gaps - cfg.delta
        for t in range(1, n + 1):
            r = lay.path_row + 3 * n_soft * (t - 1)
            ssl, tsl = lay.s_sl(t), lay.t_sl(t)
            for i in range(n_soft):
                g_base[r + 3 * i, tsl.start + i] = -1.0        # t >= 0
                g_base[r + 3 * i + 1, ssl.start + i] = 1.0     # t >= s - c
                g_base[r + 3 * i + 1, tsl.start + i] = -1.0
                h_vec[r + 3 * i + 1] = c_soft[i]
                g_base[r + 3 * i + 2, ssl.start + i] = -1.0    # t >= -s - c
                g_base[r + 3 * i + 2, tsl.start + i] = -1.0
                h_vec[r + 3 * i + 2] = c_soft[i]
    else:
        n_pred = dims.n_x_pred
        for t in range(1, n + 1):
            r = lay.path_row + 2 * n_soft * (t - 1)
            zsl = lay.z_sl(t)
            g_placements.append(((slice(r, r + n_pred), zsl), params.C, 1.0))
            g_placements.append(
                ((slice(r + n_pred, r + 2 * n_pred), zsl), params.C, -1.0))
            h_vec[r:r + 2 * n_pred] = 1.0
            ns = lay.ns_idx(t)
            g_base[r + 2 * n_pred, ns] = 1.0
            h_vec[r + 2 * n_pred] = cfg.ns_hi
            g_base[r + 2 * n_pred + 1, ns] = -1.0
            h_vec[r + 2 * n_pred + 1] = -cfg.ns_lo

    # ---- model-dependent pieces -----------------------------------------
    a_base = np.zeros((lay.n_eq, lay.n_var))
    b_base = np.zeros(lay.n_eq)
    a_placements = []
    b_placements = []
    d_prod = ad.row(params.D, 1)
    e_prod = ad.row(params.E, 1)
    d_energy = ad.row(params.D, 0)
    e_energy = ad.row(params.E, 0)

    for t in range(n):
        rows = slice(lay.dyn_row + t * n_z, lay.dyn_row + (t + 1) * n_z)
        a_base[rows, lay.z_sl(t + 1)] = np.eye(n_z)
        a_placements.append(((rows, lay.u_sl(t)), params.B, -1.0))
        if t == 0:
            b_placements.append((rows, ad.matmul(params.A, z0), 1.0))
        else:
            a_placements.append(((rows, lay.z_sl(t)), params.A, -1.0))

    for t in range(n):
        r = lay.storage_row + t
        a_base[r, lay.ns_idx(t + 1)] = 1.0
        b_base[r] = dt_h * (nprod_mid - cfg.demand_rate)
        a_placements.append(((r, lay.u_sl(t)), e_prod, -dt_h * nprod_half))
        if t == 0:
            b_base[r] += ns0
            b_placements.append((r, ad.dot(d_prod, z0), dt_h * nprod_half))
        else:
            a_base[r, lay.ns_idx(t)] = -1.0
            a_placements.append(
                ((r, lay.z_sl(t)), d_prod, -dt_h * nprod_half))

    if mode == "slack_penalty":
        n_pred = dims.n_x_pred
        for t in range(1, n + 1):
            r = lay.slack_row + (t - 1) * n_soft
            ssl = lay.s_sl(t)
            a_base[slice(r, r + n_soft), ssl] = np.eye(n_soft)
            a_placements.append(
                ((slice(r, r + n_pred), lay.z_sl(t)), params.C, 1.0))
            a_base[r + n_pred, lay.ns_idx(t)] = 1.0
            b_base[r + n_pred] = cfg.ns_mid

    q_base = np.zeros(lay.n_var)
    q_placements = []
    const = float(np.sum(prices) * dt_h * e_mid)
    for t in range(n):
        w = prices[t] * dt_h * e_half
        q_placements.append((lay.u_sl(t), e_energy, w))
        if t == 0:
            const += w * float(_val(d_energy) @ _val(z0))
        else:
            q_placements.append((lay.z_sl(t), d_energy, w))

    a_eq = ad.assemble(a_base, a_placements)
    b_vec = ad.assemble(b_base, b_placements)
    q_vec = ad.assemble(q_base, q_placements)
    g_mat = ad.assemble(g_base, g_placements) if g_placements else g_base
    return p_mat, q_vec, a_eq, b_vec, g_mat, h_vec, const, lay


def build_ocp(model: koopman.KoopmanModel, x_obs_scaled, ns_now,
              price_forecast, cfg: OcpConfig,
              mode: str = "slack_penalty") -> qpmod.QpProblem:
    """Assemble the scheduling QP around the current scaled observation.

    ``price_forecast`` must already be expanded to one entry per control
    step over the horizon. ``mode`` is ``slack_penalty`` (soft path
    constraints, used by the trained policy) or ``hard`` (plain boxes, used
    during system identification).
    """
    if mode not in ("slack_penalty", "hard"):
        raise ValueError(f"unknown OCP mode {mode!r}")
    if abs(model.dt_model - cfg.dt_minutes) > 1e-9:
        raise ValueError(
            f"model step {model.dt_model} min does not match the "
            f"{cfg.dt_minutes} min control step; upscale the model first")
    z0 = koopman.encode(model, np.asarray(x_obs_scaled, dtype=float))
    p_mat, q_vec, a_eq, b_vec, g_mat, h_vec, const, lay = _assemble(
        model, model.dims, z0, float(ns_now), price_forecast, cfg, mode)
    prob = qpmod.QpProblem(p_mat, q_vec, a_eq, b_vec, g_mat, h_vec,
                           layout=lay, const=const)
    prob.mode = mode
    return prob


def build_ocp_taped(tape: ad.Tape, model: koopman.KoopmanModel,
                    x_obs_scaled, ns_now, price_forecast, cfg: OcpConfig):
    """Tape-recorded assembly of the slack-penalty problem.

    Returns (problem, taped) where ``problem`` holds plain arrays ready to
    solve and ``taped`` maps the model-dependent data fields (``q``, ``A``,
    ``b``) to their tape variables for gradient chaining.
    """
    mv = tape.model_vars if tape.model_vars is not None \
        else ad.ModelVars.from_model(tape, model)
    tape.model_vars = mv
    z0 = ad.encode_program(tape, mv, np.asarray(x_obs_scaled, dtype=float))
    p_mat, q_vec, a_eq, b_vec, g_mat, h_vec, const, lay = _assemble(
        mv, model.dims, z0, float(ns_now), price_forecast, cfg,
        "slack_penalty")
    prob = qpmod.QpProblem(p_mat, _val(q_vec), _val(a_eq), _val(b_vec),
                           g_mat, h_vec, layout=lay, const=const)
    prob.mode = "slack_penalty"
    return prob, {"q": q_vec, "A": a_eq, "b": b_vec}


def solve_ocp(problem: qpmod.QpProblem, cfg: OcpConfig,
              warm=None) -> qpmod.QpSolution:
    return qpmod.solve_qp(problem, tol=cfg.solver_tol,
                          max_iter=cfg.solver_max_iter, warm=warm)


def first_input(problem: qpmod.QpProblem, solution: qpmod.QpSolution):
    """The scaled u*_0 block of a solution."""
    return solution.x[problem.layout.u_sl(0)].copy()


def grad_ocp(problem: qpmod.QpProblem, solution: qpmod.QpSolution,
             dl_du0) -> dict:
    """Loss gradients w.r.t. all problem data, seeded by dL/du*_0."""
    lay = problem.layout
    dl_dx = np.zeros(problem.n)
    dl_dx[lay.u_sl(0)] = np.asarray(dl_du0, dtype=float)
    return qpmod.solution_data_vjp(problem, solution, dl_dx,
                                   pin_rows=lay.t_nonneg_rows())


def backward_through_ocp(tape: ad.Tape, taped: dict,
                         problem: qpmod.QpProblem,
                         solution: qpmod.QpSolution, dl_du0) -> np.ndarray:
    """Chain dL/du*_0 through the QP data into a flat model gradient."""
    grads = grad_ocp(problem, solution, dl_du0)
    seeds = [(taped[key], grads[key]) for key in ("q", "A", "b")
             if isinstance(taped[key], ad.Var)]
    return ad.backward(tape, seeds), grads["degenerate"]
