"""System identification: data sampling, multi-step model fitting, and the
iterative sample-fit-rollout loop that produces the initial model.

Fitting minimizes the mean squared multi-step prediction error over scaled
variables: latent rollouts of length H are compared against recorded states
(predicted channels) and outputs at every intermediate step. The iterative
loop alternates fitting with closed-loop data collection under the
hard-constraint controller, keeps every sample ever collected, and returns
the model whose rollout scored the best average reward.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import koopman
from .env import DemandResponseEnv, RewardConfig
from .optim import Adam
from .plant import PlantModel, default_scaler
from .scaling import PlantScaler

DATASET_VERSION = 1


@dataclass
class Trajectory:
    """Contiguous record at a fixed cadence, physical units.

    x_obs has one more row than u/y (terminal state included).
    """
    x_obs: np.ndarray          # (T+1, n_x)
    u: np.ndarray              # (T, n_u)
    y: np.ndarray              # (T, n_y)
    dt_minutes: float = 5.0
    source: str = "random"

    def __post_init__(self):
        self.x_obs = np.asarray(self.x_obs, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        t = self.u.shape[0]
        if self.x_obs.shape[0] != t + 1 or self.y.shape[0] != t:
            raise ValueError("trajectory arrays have inconsistent lengths")
        for arr in (self.x_obs, self.u, self.y):
            if not np.all(np.isfinite(arr)):
                raise ValueError("trajectory contains non-finite entries")
        if self.source not in ("random", "enmpc_rollout"):
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]


class SIDataset:
    def __init__(self, trajectories=None):
        self.trajectories: list[Trajectory] = list(trajectories or [])

    def append(self, traj: Trajectory) -> None:
        self.trajectories.append(traj)

    def extend(self, trajs) -> None:
        for t in trajs:
            self.append(t)

    @property
    def n_steps(self) -> int:
        return sum(t.n_steps for t in self.trajectories)

    def __len__(self):
        return len(self.trajectories)

    def save(self, path) -> None:
        payload = {"version": np.array(DATASET_VERSION),
                   "n_traj": np.array(len(self.trajectories))}
        for i, t in enumerate(self.trajectories):
            payload[f"traj{i}_x"] = t.x_obs
            payload[f"traj{i}_u"] = t.u
            payload[f"traj{i}_y"] = t.y
            payload[f"traj{i}_dt"] = np.array(t.dt_minutes)
            payload[f"traj{i}_src"] = np.array(t.source)
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "SIDataset":
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {version}")
            out = cls()
            for i in range(int(data["n_traj"])):
                out.append(Trajectory(
                    data[f"traj{i}_x"], data[f"traj{i}_u"],
                    data[f"traj{i}_y"], float(data[f"traj{i}_dt"]),
                    str(data[f"traj{i}_src"])))
        return out


def sample_random(plant: PlantModel, n_steps: int, seed: int,
                  hold_minutes: float = 30.0, dt_minutes: float = 5.0,
                  episode_steps: int = 288) -> list:
    """Piecewise-constant random actuation from steady state.

    Inputs are drawn uniformly inside the operating box and held for a
    random duration of 1..hold_minutes/dt steps (drawn per segment, so the
    data covers both fast switching and sustained moves); states/outputs
    are recorded every ``dt_minutes``. Data is chunked into independent
    episodes restarted at steady state.
    """
    rng = np.random.default_rng(seed)
    sc = plant.scaler
    hold_steps = max(1, int(round(hold_minutes / dt_minutes)))
    trajectories = []
    remaining = int(n_steps)
    while remaining > 0:
        t_ep = min(episode_steps, remaining)
        state = plant.initial_state()
        xs, us, ys = [plant.observe(state)], [], []
        u = None
        until = 0
        for k in range(t_ep):
            if k >= until:
                u = sc.u.lo + rng.uniform(size=sc.u.n) * (sc.u.hi - sc.u.lo)
                until = k + int(rng.integers(1, hold_steps + 1))
            us.append(u.copy())
            ys.append(plant.outputs(state, u))
            try:
                state = plant.step(state, u, dt_minutes)
            except FloatingPointError:
                break
            xs.append(plant.observe(state))
        n_ok = len(xs) - 1
        if n_ok > 0:
            trajectories.append(Trajectory(
                np.array(xs), np.array(us[:n_ok]), np.array(ys[:n_ok]),
                dt_minutes, "random"))
        remaining -= t_ep
    return trajectories


@dataclass
class FitConfig:
    horizon: int = 12
    lr: float = 1e-3
    epochs: int = 150
    batch_size: int = 256
    val_fraction: float = 0.2
    patience: int = 30

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("fit horizon must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def _make_windows(dataset: SIDataset, scaler: PlantScaler, horizon: int):
    """Stacked scaled training windows from every trajectory.

    Returns (x0, u, x_targets, y_targets) with shapes
    (n, n_x), (n, H, n_u), (n, H, n_pred), (n, H, n_y).
    """
    x0s, us, xts, yts = [], [], [], []
    n_pred = scaler.n_pred
    for traj in dataset.trajectories:
        t_len = traj.n_steps
        if t_len < horizon:
            continue
        x_sc = scaler.x_obs.scale(traj.x_obs.T).T      # (T+1, n_x)
        u_sc = scaler.u.scale(traj.u.T).T
        y_sc = scaler.y.scale(traj.y.T).T
        for start in range(0, t_len - horizon + 1):
            x0s.append(x_sc[start])
            us.append(u_sc[start:start + horizon])
            xts.append(x_sc[start + 1:start + horizon + 1, :n_pred])
            yts.append(y_sc[start:start + horizon])
    if not x0s:
        raise ValueError("dataset has no window of the requested horizon")
    return (np.array(x0s), np.array(us), np.array(xts), np.array(yts))


def _window_loss(params, x0, u, xt, yt):
    """Mean squared multi-step error; works on arrays or tape variables.

    Batch convention: columns are samples (inputs transposed internally).
    """
    n_batch, horizon = u.shape[0], u.shape[1]
    n_elem = n_batch * horizon * (xt.shape[2] + yt.shape[2])
    if isinstance(params, ad.ModelVars):
        z = ad.encode_program(None, params, x0.T)
    else:
        z = koopman.encode(params, x0.T)
    total = None
    for h in range(horizon):
        u_h = u[:, h].T
        y_hat = ad.add(ad.matmul(params.D, z), ad.matmul(params.E, u_h))
        term = ad.sumsq(ad.sub(y_hat, yt[:, h].T))
        total = term if total is None else ad.add(total, term)
        z = ad.add(ad.matmul(params.A, z), ad.matmul(params.B, u_h))
        x_hat = ad.matmul(params.C, z)
        total = ad.add(total, ad.sumsq(ad.sub(x_hat, xt[:, h].T)))
    return ad.scale(total, 1.0 / n_elem)


def _loss_and_grad(model, x0, u, xt, yt):
    tape = ad.Tape()
    mv = ad.ModelVars.from_model(tape, model)
    tape.model_vars = mv
    loss = _window_loss(mv, x0, u, xt, yt)
    grad = ad.backward(tape, [(loss, 1.0)])
    return float(loss.value), grad


def eval_loss(model, x0, u, xt, yt) -> float:
    return float(_window_loss(model, x0, u, xt, yt))


def fit_koopman(dataset: SIDataset, dims: koopman.ModelDims,
                cfg: FitConfig, seed: int,
                scaler: PlantScaler | None = None,
                dt_minutes: float = 5.0,
                init_model: koopman.KoopmanModel | None = None):
    """Fit a fine-step model by multi-step gradient descent.

    Returns (model, val_loss) for the best validation snapshot seen.
    """
    scaler = scaler or default_scaler()
    rng = np.random.default_rng(seed)
    x0, u, xt, yt = _make_windows(dataset, scaler, cfg.horizon)
    n_win = x0.shape[0]
    perm = rng.permutation(n_win)
    n_val = max(1, int(round(cfg.val_fraction * n_win)))
    if n_val >= n_win:
        raise ValueError("not enough windows for a train/validation split")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    model = init_model.copy() if init_model is not None else \
        koopman.init_model(dims, dt_minutes, seed=seed)
    theta = koopman.flatten(model)
    opt = Adam(theta.size, lr=cfg.lr)

    best_val = eval_loss(model, x0[val_idx], u[val_idx], xt[val_idx],
                         yt[val_idx])
    best_theta = theta.copy()
    stale = 0
    decays = 0
    decay_every = max(1, cfg.patience // 3)
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grad = _loss_and_grad(model, x0[idx], u[idx], xt[idx],
                                        yt[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise RuntimeError(
                    f"divergent fit at epoch {epoch}: loss={loss}")
            theta = opt.step(theta, grad)
            koopman.unflatten_into(theta, model)
        val = eval_loss(model, x0[val_idx], u[val_idx], xt[val_idx],
                        yt[val_idx])
        if val < best_val:
            best_val, best_theta, stale = val, theta.copy(), 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
            # a sustained plateau usually means the constant-rate noise
            # floor was reached; halving the step size lowers that floor
            if stale % decay_every == 0 and decays < 4:
                opt.lr *= 0.5
                decays += 1
    koopman.unflatten_into(best_theta, model)
    return model, float(best_val)


@dataclass
class SiConfig:
    n_random_steps: int = 8640         # fine steps of initial random data
    rollout_steps: int = 96            # control steps per closed-loop pass
    max_iterations: int = 20
    stop_patience: int = 5
    upscale_k: int = 3
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def iterative_si(plant: PlantModel, train_prices, dims, si_cfg: SiConfig,
                 ocp_cfg, reward_cfg: RewardConfig | None = None,
                 seed: int = 0, dataset: SIDataset | None = None,
                 log=None):
    """Alternating fit / closed-loop-collect loop.

    Each iteration fits on all data so far, runs the hard-constraint
    controller built from the upscaled model, scores the rollout by average
    reward, and appends the fine-grained rollout record to the dataset.
    Stops when the best score has not improved for ``stop_patience``
    consecutive iterations. Returns (best_model_fine, history, dataset).
    """
    from .policy import EnmpcPolicy   # deferred: policy imports ocp

    scaler = plant.scaler
    if dataset is None:
        dataset = SIDataset()
        dataset.extend(sample_random(plant, si_cfg.n_random_steps, seed))

    fine_dt = ocp_cfg.dt_minutes / si_cfg.upscale_k
    history = []
    best_score = -np.inf
    best_model = None
    stale = 0
    for it in range(si_cfg.max_iterations):
        row = {"iteration": it, "val_loss": np.nan, "avg_reward": np.nan,
               "n_steps_data": dataset.n_steps, "fallbacks": 0}
        try:
            model, val = fit_koopman(dataset, dims, si_cfg.fit,
                                     seed=seed + 1000 * it, scaler=scaler,
                                     dt_minutes=fine_dt)
            row["val_loss"] = val
            if si_cfg.rollout_steps > 0:
                model15 = koopman.upscale(model, si_cfg.upscale_k)
                policy = EnmpcPolicy(model15, ocp_cfg, mode="hard")
                env = DemandResponseEnv(
                    plant, train_prices, reward_cfg,
                    dt_minutes=ocp_cfg.dt_minutes,
                    demand_rate=ocp_cfg.demand_rate,
                    episode_steps=si_cfg.rollout_steps,
                    record_fine=True, fine_minutes=fine_dt,
                    seed=seed + 7700 + it)
                obs = env.reset()
                rewards = []
                for _ in range(si_cfg.rollout_steps):
                    action, pinfo = policy.predict(obs)
                    obs, r, done, _ = env.step(action)
                    rewards.append(r)
                    row["fallbacks"] += int(pinfo.get("fallback", False))
                    if done:
                        break
                score = float(np.mean(rewards))
                row["avg_reward"] = score
                x_f, u_f, y_f = env.fine_trajectory()
                dataset.append(Trajectory(x_f, u_f, y_f, fine_dt,
                                          "enmpc_rollout"))
            else:
                # no rollout budget: score by validation fit instead
                score = -val
        except (RuntimeError, ValueError, FloatingPointError) as exc:
            row["error"] = str(exc)
            history.append(row)
            stale += 1
            if stale >= si_cfg.stop_patience:
                break
            continue
        history.append(row)
        if log is not None:
            log(row)
        if score > best_score:
            best_score, best_model, stale = score, model.copy(), 0
        else:
            stale += 1
            if stale >= si_cfg.stop_patience:
                break
    if best_model is None:
        raise RuntimeError("system identification never produced a model")
    return best_model, history, dataset


class KoopmanSysId(BaseEstimator):
    """Estimator-style wrapper around fit_koopman.

    fit() consumes an SIDataset; the fitted fine-step model is available as
    ``model_`` and multi-step predictions via predict().
    """

    def __init__(self, n_z=10, horizon=12, lr=1e-3, epochs=150,
                 batch_size=256, val_fraction=0.2, patience=30,
                 dt_minutes=5.0, seed=0):
        self.n_z = n_z
        self.horizon = horizon
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.patience = patience
        self.dt_minutes = dt_minutes
        self.seed = seed

    def fit(self, dataset: SIDataset, scaler: PlantScaler | None = None):
        scaler = scaler or default_scaler()
        dims = koopman.ModelDims(scaler.x_obs.n, self.n_z, scaler.u.n,
                                 scaler.n_pred, scaler.y.n)
        cfg = FitConfig(self.horizon, self.lr, self.epochs, self.batch_size,
                        self.val_fraction, self.patience)
        self.model_, self.val_loss_ = fit_koopman(
            dataset, dims, cfg, seed=self.seed, scaler=scaler,
            dt_minutes=self.dt_minutes)
        self.scaler_ = scaler
        return self

    def predict(self, x_obs_scaled, u_seq_scaled):
        """Open-loop predicted state sequence for a scaled input plan."""
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted")
        _, x_hat, _ = koopman.rollout(self.model_, x_obs_scaled,
                                      u_seq_scaled)
        return x_hat
