"""Plant models: the simulator interface and two concrete implementations.

``SurrogatePlant`` is the desk-scale stand-in for a cryogenic separation
unit: four coupled first-order-lag states with bounded tanh cross-terms, an
energy output with strong direct input feedthrough, and a product-rate
output that feeds the storage balance. Its coefficients are fixed here and
chosen so that (i) the nominal steady state sits exactly at the midpoint of
every operating box, (ii) aggressive input moves can push the constrained
states out of their boxes within a couple of control steps, and (iii)
energy scales strongly with the main air flow, creating the price-following
incentive.

``LinearLatentPlant`` is an exactly-linear discrete-time plant (in scaled
units) used to validate that system identification can recover a
representable system.
"""
from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .scaling import BoxScaler, PlantScaler

# operating boxes: rows are (lo, hi) per channel
X_OBS_BOUNDS = np.array([
    [0.0, 1800.0],   # product impurity, ppm
    [2.0, 5.0],      # reboiler-condenser temperature difference, K
    [2.0, 10.0],     # reboiler holdup, kmol
    [80.0, 90.0],    # tray temperature, K (observed only, unconstrained)
])
U_BOUNDS = np.array([
    [30.0, 50.0],    # main air compressor flow, mol/s
    [0.0, 2.0],      # drain flow, mol/s
    [0.0, 0.1],      # heat-exchange bypass fraction
    [0.51, 0.54],    # condenser split fraction
])
Y_BOUNDS = np.array([
    [20.0, 60.0],    # electrical power, MW
    [0.0, 2.0],      # product rate, kmol/h
])
NS_BOUNDS = (0.0, 6.0)   # storage holdup box, kmol


def default_scaler() -> PlantScaler:
    return PlantScaler(
        x_obs=BoxScaler(X_OBS_BOUNDS[:, 0], X_OBS_BOUNDS[:, 1]),
        u=BoxScaler(U_BOUNDS[:, 0], U_BOUNDS[:, 1]),
        y=BoxScaler(Y_BOUNDS[:, 0], Y_BOUNDS[:, 1]),
        n_pred=3,
    )


class PlantModel(ABC):
    """Deterministic simulator contract used by the environment and SI.

    States are opaque; ``observe`` exposes the physical observation vector
    and ``outputs`` the physical output vector, which may depend directly on
    the current input (feedthrough).
    """

    x_obs_names = ("impurity_ppm", "dT_rc_K", "holdup_kmol", "tray_temp_K")
    y_names = ("power_mw", "product_rate_kmolh")

    @abstractmethod
    def steady_state(self):
        """(x_ss, u_ss): a known operating point with zero drift."""

    @abstractmethod
    def initial_state(self) -> np.ndarray:
        ...

    @abstractmethod
    def observe(self, state) -> np.ndarray:
        ...

    @abstractmethod
    def outputs(self, state, u) -> np.ndarray:
        ...

    @abstractmethod
    def step(self, state, u, dt_minutes) -> np.ndarray:
        """Advance ``dt_minutes`` under constant input; pure function."""


class SurrogatePlant(PlantModel):
    """Four-state nonlinear surrogate with direct feedthrough.

    Internally the dynamics are written on box-scaled deviations xi (state)
    and w (input), all zero at the nominal point. Each state is strictly
    self-damped with bounded couplings, so trajectories stay bounded for any
    inputs inside the operating box.
    """

    # time constants, hours
    TAU = np.array([0.3, 0.5, 0.8, 0.3])

    def __init__(self, substep_minutes: float = 1.0):
        if substep_minutes <= 0:
            raise ValueError("substep_minutes must be positive")
        self.substep_minutes = float(substep_minutes)
        self.scaler = default_scaler()

    def steady_state(self):
        return self.scaler.x_obs.mid.copy(), self.scaler.u.mid.copy()

    def initial_state(self):
        return self.scaler.x_obs.mid.copy()

    def observe(self, state):
        return np.asarray(state, dtype=float).copy()

    def _rhs_scaled(self, xi, w):
        """d(xi)/dt in scaled units per hour."""
        th = np.tanh
        d0 = (-xi[0] + 1.60 * th(1.1 * w[0] + 0.35 * w[2] - 0.25 * w[3])
              + 0.20 * th(0.5 * xi[2])) / self.TAU[0]
        d1 = (-xi[1] - 1.40 * th(0.7 * w[0] - 0.45 * w[1] + 0.3 * xi[3])
              + 0.15 * th(0.4 * xi[0])) / self.TAU[1]
        d2 = (-xi[2] + 1.40 * th(0.7 * w[1] - 0.5 * w[0] + 0.3 * w[2])
              + 0.25 * th(0.5 * xi[1])) / self.TAU[2]
        d3 = (-xi[3] + 0.90 * th(0.6 * w[0] + 0.5 * w[2] - 0.2 * xi[0])) \
            / self.TAU[3]
        return np.array([d0, d1, d2, d3])

    def outputs(self, state, u):
        xi = self.scaler.x_obs.scale(np.asarray(state, dtype=float))
        w = self.scaler.u.scale(np.asarray(u, dtype=float))
        e_scaled = (0.45 * w[0] + 0.12 * w[2] + 0.08 * w[1]
                    + 0.05 * np.tanh(xi[3]) + 0.04 * np.tanh(xi[1]))
        n_scaled = (0.35 * w[0] + 0.18 * w[2] - 0.06 * xi[0]
                    + 0.05 * np.tanh(xi[2]))
        return self.scaler.y.unscale(np.array([e_scaled, n_scaled]))

    def step(self, state, u, dt_minutes):
        xi = self.scaler.x_obs.scale(np.asarray(state, dtype=float))
        w = self.scaler.u.scale(np.asarray(u, dtype=float))
        n_sub = max(1, int(round(dt_minutes / self.substep_minutes)))
        h = (dt_minutes / n_sub) / 60.0  # hours
        for _ in range(n_sub):
            k1 = self._rhs_scaled(xi, w)
            k2 = self._rhs_scaled(xi + 0.5 * h * k1, w)
            k3 = self._rhs_scaled(xi + 0.5 * h * k2, w)
            k4 = self._rhs_scaled(xi + h * k3, w)
            xi = xi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(xi)):
            raise FloatingPointError("plant state diverged")
        return self.scaler.x_obs.unscale(xi)


class LinearLatentPlant(PlantModel):
    """Discrete-time plant that is exactly linear in scaled units.

    x_scaled advances by a stable random (A_p, B_p) every ``dt_minutes``;
    outputs are y_scaled = D_p x_scaled + E_p u_scaled. A Koopman model with
    a near-linear encoder can represent this system exactly, which makes it
    the reference recovery target for system identification.
    """

    def __init__(self, seed: int = 0, dt_minutes: float = 5.0,
                 spectral_radius: float = 0.9):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((4, 4))
        a *= spectral_radius / max(abs(np.linalg.eigvals(a)))
        self.A_p = a
        self.B_p = 0.15 * rng.standard_normal((4, 4))
        self.D_p = 0.35 * rng.standard_normal((2, 4))
        self.E_p = 0.25 * rng.standard_normal((2, 4))
        self.dt_minutes = float(dt_minutes)
        self.scaler = default_scaler()

    def steady_state(self):
        return self.scaler.x_obs.mid.copy(), self.scaler.u.mid.copy()

    def initial_state(self):
        return self.scaler.x_obs.mid.copy()

    def observe(self, state):
        return np.asarray(state, dtype=float).copy()

    def outputs(self, state, u):
        xs = self.scaler.x_obs.scale(np.asarray(state, dtype=float))
        us = self.scaler.u.scale(np.asarray(u, dtype=float))
        return self.scaler.y.unscale(self.D_p @ xs + self.E_p @ us)

    def step(self, state, u, dt_minutes):
        k, rem = divmod(dt_minutes, self.dt_minutes)
        if abs(rem) > 1e-9:
            raise ValueError(
                f"dt must be a multiple of {self.dt_minutes} min")
        xs = self.scaler.x_obs.scale(np.asarray(state, dtype=float))
        us = self.scaler.u.scale(np.asarray(u, dtype=float))
        for _ in range(int(round(k))):
            xs = self.A_p @ xs + self.B_p @ us
        return self.scaler.x_obs.unscale(xs)
