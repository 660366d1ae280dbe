"""Receding-horizon policy: model + OCP solve as a callable controller.

Wraps problem assembly and the QP solve with the operational details a
controller needs: expanding the hourly price forecast to control steps,
warm-starting each solve from the previous step's shifted solution, falling
back from hard to soft constraints when the hard problem is infeasible, and
reusing the last action if a solve fails outright.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import ocp as ocpmod
from . import qp as qpmod
from .env import Observation
from .koopman import KoopmanModel
from .prices import expand_to_steps


def shift_warm(layout: ocpmod.OcpLayout, sol: qpmod.QpSolution):
    """Shift a solution one control step forward for warm starting.

    Stage blocks move one step earlier; the final stage is repeated. Duals
    and inequality slacks are reused as-is (the solver floors them away from
    the boundary).
    """
    x = sol.x.copy()
    n = layout.horizon
    for t in range(1, n):
        x[layout.z_sl(t)] = sol.x[layout.z_sl(t + 1)]
        x[layout.ns_idx(t)] = sol.x[layout.ns_idx(t + 1)]
        if layout.mode == "slack_penalty":
            x[layout.s_sl(t)] = sol.x[layout.s_sl(t + 1)]
            x[layout.t_sl(t)] = sol.x[layout.t_sl(t + 1)]
    for t in range(n - 1):
        x[layout.u_sl(t)] = sol.x[layout.u_sl(t + 1)]
    return (x, sol.nu, sol.lam, sol.s)


def solve_taped_for(model: KoopmanModel, obs: Observation,
                    cfg: ocpmod.OcpConfig, warm=None):
    """One differentiable solve: returns (u0, tape, taped, problem, sol).

    The tape records the soft-constrained problem assembly so dL/du0 can be
    chained into model-parameter gradients via backward_through_ocp.
    """
    steps_per_hour = int(round(60.0 / cfg.dt_minutes))
    prices = expand_to_steps(obs.price_forecast, steps_per_hour, cfg.horizon)
    tape = ad.Tape()
    prob, taped = ocpmod.build_ocp_taped(tape, model, obs.x_obs_scaled,
                                         obs.n_s, prices, cfg)
    sol = qpmod.solve_qp(prob, tol=cfg.solver_tol,
                         max_iter=cfg.solver_max_iter, warm=warm)
    u0 = ocpmod.first_input(prob, sol) if sol.ok else None
    return u0, tape, taped, prob, sol


class EnmpcPolicy:
    """Stateful controller around one (shared) model.

    ``mode`` selects soft path constraints (``slack_penalty``, the trained
    policy) or hard boxes (``hard``, used during system identification).
    The model object is referenced, not copied: in-place parameter updates
    are picked up on the next solve.
    """

    def __init__(self, model: KoopmanModel, cfg: ocpmod.OcpConfig,
                 mode: str = "slack_penalty"):
        if mode not in ("slack_penalty", "hard"):
            raise ValueError(f"unknown policy mode {mode!r}")
        if abs(model.dt_model - cfg.dt_minutes) > 1e-9:
            raise ValueError("model time step does not match the control "
                             "step; upscale the model first")
        self.model = model
        self.cfg = cfg
        self.mode = mode
        self.steps_per_hour = int(round(60.0 / cfg.dt_minutes))
        self.reset()

    def reset(self) -> None:
        self._warm = None
        self._warm_key = None
        self._last_action = None

    def _horizon_prices(self, obs: Observation) -> np.ndarray:
        return expand_to_steps(obs.price_forecast, self.steps_per_hour,
                               self.cfg.horizon)

    def _take_warm(self, mode: str):
        # problem size is a pure function of (mode, config), so the mode
        # key is enough to guarantee matching shapes
        if self._warm is not None and self._warm_key == mode:
            return self._warm
        return None

    def _store_warm(self, mode: str, prob, sol) -> None:
        self._warm = shift_warm(prob.layout, sol)
        self._warm_key = mode

    def predict(self, obs: Observation):
        """Scaled first input of the OCP solution plus solve diagnostics."""
        prices = self._horizon_prices(obs)
        info = {"fallback": False, "ok": True, "degenerate": False}
        prob = ocpmod.build_ocp(self.model, obs.x_obs_scaled, obs.n_s,
                                prices, self.cfg, self.mode)
        sol = ocpmod.solve_ocp(prob, self.cfg,
                               warm=self._take_warm(self.mode))
        if not sol.ok and self.mode == "hard":
            # infeasible hard problem: soften and retry
            info["fallback"] = True
            prob = ocpmod.build_ocp(self.model, obs.x_obs_scaled, obs.n_s,
                                    prices, self.cfg, "slack_penalty")
            sol = ocpmod.solve_ocp(prob, self.cfg,
                                   warm=self._take_warm("slack_penalty"))
        info["status"] = sol.status
        info["iterations"] = sol.iterations
        info["solve_time"] = sol.solve_time
        if sol.ok:
            action = ocpmod.first_input(prob, sol)
            self._store_warm(prob.mode, prob, sol)
            self._last_action = action.copy()
            info["degenerate"] = sol.degenerate
            info["objective"] = sol.obj
            if prob.mode == "slack_penalty":
                # reusable as a warm start when re-solving this exact problem
                info["warm"] = (sol.x.copy(), sol.nu.copy(),
                                sol.lam.copy(), sol.s.copy())
        else:
            info["ok"] = False
            action = (self._last_action.copy() if self._last_action
                      is not None else np.zeros(self.model.dims.n_u))
        return action, info

    def solve_taped(self, obs: Observation):
        """Differentiable soft-constrained solve with warm-start caching."""
        u0, tape, taped, prob, sol = solve_taped_for(
            self.model, obs, self.cfg,
            warm=self._take_warm("slack_penalty"))
        if sol.ok:
            self._store_warm("slack_penalty", prob, sol)
            self._last_action = u0.copy()
        return u0, tape, taped, prob, sol
