"""Demand-response environment around a plant simulator.

Each step holds the commanded input constant for one 15-minute control
interval, integrates the plant, samples energy/production at the interval
end (consistent with the coarse model's output convention), advances the
storage balance, and scores the step: scaled savings against steady-state
operation when feasible, the negative sum of violation magnitudes
otherwise. The environment also keeps an exact storage ledger and an
optional fine-grained (5-minute) record used for system identification.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .plant import NS_BOUNDS, PlantModel
from .prices import PriceSeries


@dataclass
class RewardConfig:
    beta: float = 5e-5
    violation_weights: np.ndarray = field(
        default_factory=lambda: np.ones(4))

    def __post_init__(self):
        self.violation_weights = np.asarray(self.violation_weights,
                                            dtype=float)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if np.any(self.violation_weights < 0):
            raise ValueError("violation weights must be nonnegative")


def compute_reward(step_cost: float, steady_cost: float, violations,
                   cfg: RewardConfig) -> float:
    """Savings-scaled reward when feasible, negative violation sum when not.

    ``violations`` are nonnegative magnitudes in scaled units (storage
    unscaled); any strictly positive entry switches the step to the penalty
    branch and the cost term is dropped entirely.
    """
    violations = np.asarray(violations, dtype=float)
    if np.any(violations < 0):
        raise ValueError("violations must be nonnegative")
    if np.any(violations > 0):
        return float(-np.sum(cfg.violation_weights[:violations.size]
                             * violations))
    return float(cfg.beta * (steady_cost - step_cost))


@dataclass
class Observation:
    x_obs_scaled: np.ndarray      # 4 channels in [-1, 1] nominally
    n_s: float                    # storage holdup, unscaled
    price_forecast: np.ndarray    # hourly, raw currency/MWh
    price_norm: tuple = (50.0, 12.0)

    def vector(self) -> np.ndarray:
        """Flat normalized form for function approximators."""
        mean, std = self.price_norm
        std = std if std > 0 else 1.0
        ns_mid = 0.5 * (NS_BOUNDS[0] + NS_BOUNDS[1])
        ns_half = 0.5 * (NS_BOUNDS[1] - NS_BOUNDS[0])
        return np.concatenate([
            self.x_obs_scaled,
            [(self.n_s - ns_mid) / ns_half],
            (self.price_forecast - mean) / std,
        ])

    @property
    def size(self) -> int:
        return self.x_obs_scaled.size + 1 + self.price_forecast.size


class DemandResponseEnv:
    """Receding-horizon scheduling environment with a storage buffer.

    Actions are scaled inputs in [-1, 1]^4 (clipped if outside). Episodes
    start at the plant steady state with storage at mid-level and a random
    hour offset into the price series.
    """

    def __init__(self, plant: PlantModel, prices: PriceSeries,
                 reward_cfg: RewardConfig | None = None,
                 dt_minutes: float = 15.0, demand_rate: float = 1.0,
                 episode_steps: int = 288, forecast_hours: int = 9,
                 random_start: bool = True, record_fine: bool = False,
                 fine_minutes: float = 5.0, seed: int = 0):
        self.plant = plant
        self.prices = prices
        self.reward_cfg = reward_cfg or RewardConfig()
        self.dt_minutes = float(dt_minutes)
        self.demand_rate = float(demand_rate)
        self.episode_steps = int(episode_steps)
        self.forecast_hours = int(forecast_hours)
        self.random_start = random_start
        self.record_fine = record_fine
        self.fine_minutes = float(fine_minutes)
        self.scaler = plant.scaler
        self.rng = np.random.default_rng(seed)

        x_ss, u_ss = plant.steady_state()
        y_ss = plant.outputs(x_ss, u_ss)
        self.e_steady = float(y_ss[0])
        self.n_steady = float(y_ss[1])
        self.ns_lo, self.ns_hi = NS_BOUNDS
        self.price_norm = (prices.mean(), float(np.sqrt(prices.var())))

        steps_per_hour = 60.0 / self.dt_minutes
        episode_hours = int(np.ceil(self.episode_steps / steps_per_hour))
        self.max_offset = prices.n_hours - episode_hours - self.forecast_hours
        if self.max_offset < 0:
            raise ValueError(
                "price series too short for the episode length plus the "
                "forecast window")
        self._reset_needed = True

    @property
    def n_obs(self) -> int:
        return self.scaler.x_obs.n + 1 + self.forecast_hours

    @property
    def dt_hours(self) -> float:
        return self.dt_minutes / 60.0

    def _hour(self) -> int:
        return self.offset_hours + int(self.t * self.dt_minutes) // 60

    def _observe(self) -> Observation:
        x_sc = self.scaler.x_obs.scale(self.plant.observe(self.state))
        fc = self.prices.forecast(self._hour(), self.forecast_hours)
        return Observation(x_sc, self.ns, fc, self.price_norm)

    def reset(self, seed=None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.plant.initial_state()
        self.ns = 0.5 * (self.ns_lo + self.ns_hi)
        self.t = 0
        if self.random_start and self.max_offset > 0:
            self.offset_hours = int(self.rng.integers(0, self.max_offset + 1))
        else:
            self.offset_hours = 0
        self.ledger = {"ns_start": self.ns, "flows": [], "clips": []}
        self._fine_x = [self.plant.observe(self.state)]
        self._fine_u = []
        self._fine_y = []
        self._reset_needed = False
        return self._observe()

    def step(self, action_scaled):
        if self._reset_needed:
            raise RuntimeError("call reset() before step()")
        a = np.asarray(action_scaled, dtype=float).reshape(self.scaler.u.n)
        a_clipped = np.clip(a, -1.0, 1.0)
        was_clipped = float(np.abs(a - a_clipped).max())
        u_phys = self.scaler.u.unscale(a_clipped)

        n_fine = max(1, int(round(self.dt_minutes / self.fine_minutes)))
        state = self.state
        for _ in range(n_fine):
            if self.record_fine:
                self._fine_u.append(u_phys.copy())
                self._fine_y.append(self.plant.outputs(state, u_phys))
            state = self.plant.step(state, u_phys, self.dt_minutes / n_fine)
            if self.record_fine:
                self._fine_x.append(self.plant.observe(state))
        self.state = state

        y = self.plant.outputs(self.state, u_phys)
        e_mw, n_prod = float(y[0]), float(y[1])
        ns_raw = self.ns + self.dt_hours * (n_prod - self.demand_rate)
        ns_new = min(max(ns_raw, self.ns_lo), self.ns_hi)
        clip_corr = ns_new - ns_raw
        self.ledger["flows"].append(
            self.dt_hours * (n_prod - self.demand_rate))
        self.ledger["clips"].append(clip_corr)
        self.ns = ns_new

        x_sc = self.scaler.x_obs.scale(self.plant.observe(self.state))
        v_state = np.maximum(0.0, np.abs(x_sc[:self.scaler.n_pred]) - 1.0)
        v_ns = max(0.0, ns_raw - self.ns_hi) + max(0.0, self.ns_lo - ns_raw)
        violations = np.concatenate([v_state, [v_ns]])

        price = float(self.prices.prices[self._hour()])
        step_cost = price * self.dt_hours * e_mw
        steady_cost = price * self.dt_hours * self.e_steady
        reward = compute_reward(step_cost, steady_cost, violations,
                                self.reward_cfg)

        self.t += 1
        done = self.t >= self.episode_steps
        info = {
            "y": y, "price": price, "step_cost": step_cost,
            "steady_cost": steady_cost, "violations": violations,
            "any_violation": bool(np.any(violations > 0)),
            "ns_raw": ns_raw, "ns_clip": clip_corr,
            "action_clip_mag": was_clipped, "u_phys": u_phys,
            "hour": self._hour(),
        }
        obs = self._observe() if not done else self._terminal_observation()
        if done:
            self._reset_needed = True
        return obs, reward, done, info

    def _terminal_observation(self) -> Observation:
        """Final observation; the forecast window may touch the series tail
        but by construction never reads past it."""
        x_sc = self.scaler.x_obs.scale(self.plant.observe(self.state))
        hour = min(self._hour(), self.prices.n_hours - self.forecast_hours)
        fc = self.prices.forecast(hour, self.forecast_hours)
        return Observation(x_sc, self.ns, fc, self.price_norm)

    def storage_ledger(self) -> dict:
        """Exact bookkeeping: ns_end - ns_start = sum(flows) + sum(clips)."""
        return {
            "ns_start": self.ledger["ns_start"],
            "ns_end": self.ns,
            "flow_sum": float(np.sum(self.ledger["flows"]))
            if self.ledger["flows"] else 0.0,
            "clip_sum": float(np.sum(self.ledger["clips"]))
            if self.ledger["clips"] else 0.0,
        }

    def fine_trajectory(self):
        """(X, U, Y) arrays sampled at the fine cadence since last reset."""
        if not self.record_fine:
            raise RuntimeError("environment was not recording fine data")
        return (np.array(self._fine_x), np.array(self._fine_u),
                np.array(self._fine_y))


TRAJECTORY_COLUMNS = (
    ["t"] + [f"u{i}" for i in range(4)] + [f"x{i}" for i in range(4)]
    + ["n_s", "power_mw", "product_rate", "price", "reward"]
    + ["viol_impurity", "viol_dtrc", "viol_holdup", "viol_storage"])


def write_trajectory(path, rows, config_hash: str | None = None) -> None:
    """One row per control step; '#'-prefixed metadata lines first."""
    with open(path, "w") as f:
        if config_hash:
            f.write(f"# config {config_hash}\n")
        f.write(",".join(TRAJECTORY_COLUMNS) + "\n")
        for row in rows:
            if len(row) != len(TRAJECTORY_COLUMNS):
                raise ValueError("trajectory row has wrong arity")
            f.write(",".join(f"{v:.10g}" for v in row) + "\n")


def read_trajectory(path) -> dict:
    """Columns as arrays, keyed by name; skips metadata lines."""
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()
                 and not ln.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return {name: data[:, j] for j, name in enumerate(header)}
