"""Adaptive-moment gradient steps and gradient-norm clipping."""
from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if theta.shape != self.m.shape or grad.shape != self.m.shape:
            raise ValueError("parameter/gradient size mismatch")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(),
                "t": np.array(self.t)}

    def load_state_dict(self, state) -> None:
        self.m = np.array(state["m"], dtype=float)
        self.v = np.array(state["v"], dtype=float)
        self.t = int(state["t"])


def clip_global_norm(grads, max_norm: float):
    """Scale a list of gradient arrays jointly so the stacked vector's
    2-norm is at most ``max_norm``. Returns (clipped_list, original_norm)."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total <= max_norm or total == 0.0:
        return [g.copy() for g in grads], total
    scale = max_norm / total
    return [g * scale for g in grads], total
