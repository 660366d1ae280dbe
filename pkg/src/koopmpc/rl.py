"""Proximal policy optimization over the OCP-based policy.

The policy's mean action is the first input of the soft-constrained OCP
solution; exploration adds fixed diagonal Gaussian noise in scaled action
units. Policy gradients flow through the QP solution map into the model
parameters (encoder and matrices), so PPO fine-tunes the same model that
system identification produced. A small MLP critic provides the baseline;
updates use clipped surrogates, GAE, joint global gradient-norm clipping,
and adaptive-moment steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import koopman
from .env import DemandResponseEnv, Observation
from .ocp import OcpConfig, backward_through_ocp
from .optim import Adam, clip_global_norm
from .policy import EnmpcPolicy, solve_taped_for

CHECKPOINT_VERSION = 1


@dataclass
class PpoConfig:
    gamma: float = 0.98
    lam_gae: float = 0.95
    clip_eps: float = 0.2
    value_coeff: float = 5.0
    entropy_coeff: float = 1e-3
    n_actors: int = 8
    t_ppo: int = 512
    minibatch: int = 256
    epochs: int = 10
    lr: float = 1e-4
    max_grad_norm: float = 0.5
    sigma: tuple = (0.15, 0.15, 0.15, 0.15)
    critic_hidden: tuple = (64, 64)
    normalize_adv: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam_gae <= 1.0:
            raise ValueError("lam_gae must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if (self.n_actors * self.t_ppo) % self.minibatch != 0:
            raise ValueError("minibatch must divide n_actors * t_ppo")

    @property
    def sigma_arr(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=float)


def gaussian_logp(action, mean, sigma) -> float:
    """Diagonal Gaussian log-density (pre-clip convention)."""
    a = np.asarray(action, float)
    m = np.asarray(mean, float)
    s = np.asarray(sigma, float)
    return float(-0.5 * np.sum(((a - m) / s) ** 2)
                 - np.sum(np.log(s)) - 0.5 * a.size * np.log(2 * np.pi))


def gaussian_entropy(sigma) -> float:
    s = np.asarray(sigma, float)
    return float(np.sum(np.log(s)) + 0.5 * s.size * np.log(2 * np.pi * np.e))


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation over one actor stream.

    ``values`` has one bootstrap entry more than ``rewards``; a done flag
    cuts the recursion at episode boundaries. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    t_len = rewards.shape[0]
    if values.shape[0] != t_len + 1 or dones.shape[0] != t_len:
        raise ValueError("gae inputs have inconsistent lengths")
    adv = np.zeros(t_len)
    last = 0.0
    for t in range(t_len - 1, -1, -1):
        nonterm = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv, adv + values[:t_len]


class Critic:
    """MLP value function with tanh hidden layers."""

    def __init__(self, n_obs: int, hidden=(64, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = (n_obs, *hidden, 1)
        self.weights, self.biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, (n_out, n_in)))
            self.biases.append(rng.uniform(-bound, bound, n_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size
                   for w, b in zip(self.weights, self.biases))

    def value(self, obs_mat) -> np.ndarray:
        """(B, n_obs) -> (B,) value estimates."""
        h = np.atleast_2d(np.asarray(obs_mat, dtype=float)).T
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w @ h + b[:, None]
            if i < last:
                h = np.tanh(h)
        return h[0]

    def loss_and_grad(self, obs_mat, targets):
        """Mean squared value error and its flat parameter gradient."""
        obs_mat = np.atleast_2d(np.asarray(obs_mat, dtype=float))
        targets = np.asarray(targets, dtype=float)
        tape = ad.Tape()
        wv = [tape.leaf(w) for w in self.weights]
        bv = [tape.leaf(b) for b in self.biases]
        h = obs_mat.T
        last = len(wv) - 1
        for i, (w, b) in enumerate(zip(wv, bv)):
            h = ad.affine(w, h, b)
            if i < last:
                h = ad.tanh(h)
        values = ad.row(h, 0)
        loss = ad.scale(ad.sumsq(ad.sub(values, targets)),
                        1.0 / targets.size)
        grads = tape.gradients([(loss, 1.0)])
        flat = np.concatenate(
            [tape.grad_of(grads, v).ravel()
             for pair in zip(wv, bv) for v in pair])
        return float(loss.value), flat

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for pair in zip(self.weights, self.biases)
             for a in pair])

    def load_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for i in range(len(self.weights)):
            for arr in (self.weights[i], self.biases[i]):
                arr[...] = theta[pos:pos + arr.size].reshape(arr.shape)
                pos += arr.size
        if pos != theta.size:
            raise ValueError("critic parameter vector has wrong length")


def act(policy: EnmpcPolicy, obs: Observation, sigma, rng):
    """Sample an exploratory action around the OCP optimum.

    Returns (action, log_prob, info); the action is the pre-clip Gaussian
    sample (the environment clips), and info carries solve diagnostics plus
    the warm-start tuple for later re-solves.
    """
    mean, info = policy.predict(obs)
    sigma = np.asarray(sigma, dtype=float)
    action = mean + sigma * rng.standard_normal(mean.size)
    return action, gaussian_logp(action, mean, sigma), info


@dataclass
class RolloutBuffer:
    """Per-step records from n_actors parallel streams, concatenated."""
    obs: list = field(default_factory=list)
    obs_vec: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    ok: list = field(default_factory=list)
    warm: list = field(default_factory=list)
    actor_bounds: list = field(default_factory=list)  # (start, end) slices
    bootstrap_obs_vec: list = field(default_factory=list)  # one per actor

    def __len__(self):
        return len(self.actions)

    def finalize(self, critic: Critic, cfg: PpoConfig):
        """Compute values, advantages and returns for every sample."""
        obs_mat = np.array(self.obs_vec)
        values_all = critic.value(obs_mat)
        boot = critic.value(np.array(self.bootstrap_obs_vec))
        adv = np.empty(len(self))
        ret = np.empty(len(self))
        for a, (lo, hi) in enumerate(self.actor_bounds):
            vals = np.concatenate([values_all[lo:hi], [boot[a]]])
            adv[lo:hi], ret[lo:hi] = gae(
                self.rewards[lo:hi], vals, self.dones[lo:hi],
                cfg.gamma, cfg.lam_gae)
        self.values = values_all
        self.advantages = adv
        self.returns = ret
        if cfg.normalize_adv:
            std = adv.std()
            self.advantages = ((adv - adv.mean()) / std if std > 0
                               else np.zeros_like(adv))
        return self


def collect_rollouts(envs, policies, obs_list, critic, cfg: PpoConfig,
                     ocp_cfg: OcpConfig, rng) -> tuple:
    """Advance every actor t_ppo steps; returns (buffer, new_obs_list)."""
    buf = RolloutBuffer()
    sigma = cfg.sigma_arr
    for a, (env, policy) in enumerate(zip(envs, policies)):
        start = len(buf)
        obs = obs_list[a]
        for _ in range(cfg.t_ppo):
            action, logp, info = act(policy, obs, sigma, rng)
            next_obs, reward, done, _ = env.step(action)
            buf.obs.append(obs)
            buf.obs_vec.append(obs.vector())
            buf.actions.append(action)
            buf.logp.append(logp)
            buf.rewards.append(reward)
            buf.dones.append(done)
            buf.ok.append(info["ok"])
            buf.warm.append(info.get("warm"))
            if done:
                boot_obs = next_obs
                obs = env.reset()
                policy.reset()
            else:
                obs = next_obs
        final_for_boot = boot_obs if buf.dones[-1] else obs
        buf.bootstrap_obs_vec.append(final_for_boot.vector())
        buf.actor_bounds.append((start, len(buf)))
        obs_list[a] = obs
    buf.rewards = np.asarray(buf.rewards, dtype=float)
    buf.dones = np.asarray(buf.dones, dtype=bool)
    buf.logp = np.asarray(buf.logp, dtype=float)
    return buf.finalize(critic, cfg), obs_list


def ppo_update(model, critic: Critic, buffer: RolloutBuffer,
               cfg: PpoConfig, ocp_cfg: OcpConfig, opt_policy: Adam,
               opt_critic: Adam, rng) -> dict:
    """K epochs of clipped-surrogate updates over shuffled minibatches.

    Per sample the policy-gradient seed dL/du*_0 is chained through the
    stored OCP via implicit differentiation; OCP-failure steps contribute
    to the value loss only.
    """
    theta = koopman.flatten(model)
    theta_c = critic.flatten()
    sigma = cfg.sigma_arr
    n_total = len(buffer)
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0,
             "approx_kl": 0.0, "n_solve_failures": 0, "n_skipped": 0,
             "grad_norm": 0.0, "n_minibatches": 0,
             "entropy": gaussian_entropy(sigma)}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_total)
        for lo in range(0, n_total, cfg.minibatch):
            mb = perm[lo:lo + cfg.minibatch]
            grad_theta = np.zeros_like(theta)
            pol_loss = 0.0
            clipped = 0
            kl = 0.0
            valid = 0
            for i in mb:
                if not buffer.ok[i]:
                    stats["n_skipped"] += 1
                    continue
                u0, tape, taped, prob, sol = solve_taped_for(
                    model, buffer.obs[i], ocp_cfg, warm=buffer.warm[i])
                if not sol.ok:
                    stats["n_solve_failures"] += 1
                    continue
                adv = buffer.advantages[i]
                logp_new = gaussian_logp(buffer.actions[i], u0, sigma)
                ratio = np.exp(logp_new - buffer.logp[i])
                surr1 = ratio * adv
                surr2 = np.clip(ratio, 1 - cfg.clip_eps,
                                1 + cfg.clip_eps) * adv
                pol_loss += -min(surr1, surr2)
                kl += buffer.logp[i] - logp_new
                clipped += int(surr1 > surr2)
                valid += 1
                if surr1 <= surr2:
                    # active branch is the unclipped surrogate
                    dl_dmean = (-adv * ratio
                                * (buffer.actions[i] - u0) / sigma ** 2)
                    g_i, _ = backward_through_ocp(tape, taped, prob, sol,
                                                  dl_dmean)
                    grad_theta += g_i
            if valid > 0:
                grad_theta /= valid
                pol_loss /= valid
                kl /= valid
            v_loss, grad_c = critic.loss_and_grad(
                np.array(buffer.obs_vec)[mb], buffer.returns[mb])
            grad_c *= cfg.value_coeff
            (grad_theta, grad_c), gnorm = clip_global_norm(
                [grad_theta, grad_c], cfg.max_grad_norm)
            theta = opt_policy.step(theta, grad_theta)
            theta_c = opt_critic.step(theta_c, grad_c)
            koopman.unflatten_into(theta, model)
            critic.load_flat(theta_c)
            stats["policy_loss"] += pol_loss
            stats["value_loss"] += v_loss
            stats["clip_frac"] += clipped / max(1, valid)
            stats["approx_kl"] += kl
            stats["grad_norm"] += gnorm
            stats["n_minibatches"] += 1
    nmb = max(1, stats["n_minibatches"])
    for key in ("policy_loss", "value_loss", "clip_frac", "approx_kl",
                "grad_norm"):
        stats[key] /= nmb
    return stats


def evaluate_policy(policy: EnmpcPolicy, env: DemandResponseEnv,
                    reset_seed: int = 0) -> dict:
    """One deterministic episode; returns metrics and trajectory rows."""
    policy.reset()
    obs = env.reset(reset_seed)
    rewards, solve_times = [], []
    n_viol = 0
    total_cost = 0.0
    total_steady = 0.0
    n_fallback = 0
    n_failed = 0
    rows = []
    done = False
    t = 0
    while not done:
        action, pinfo = policy.predict(obs)
        obs, reward, done, info = env.step(action)
        rewards.append(reward)
        solve_times.append(pinfo["solve_time"])
        n_viol += int(info["any_violation"])
        total_cost += info["step_cost"]
        total_steady += info["steady_cost"]
        n_fallback += int(pinfo.get("fallback", False))
        n_failed += int(not pinfo["ok"])
        x_phys = env.plant.observe(env.state)
        rows.append([t, *info["u_phys"], *x_phys, env.ns, *info["y"],
                     info["price"], reward, *info["violations"]])
        t += 1
    solve_times = np.asarray(solve_times)
    return {
        "avg_reward": float(np.mean(rewards)),
        "violation_fraction": n_viol / max(1, t),
        "savings_fraction": (total_steady - total_cost) / total_steady
        if total_steady > 0 else 0.0,
        "total_cost": total_cost,
        "steady_cost": total_steady,
        "solve_time_min": float(solve_times.min()),
        "solve_time_mean": float(solve_times.mean()),
        "solve_time_max": float(solve_times.max()),
        "n_steps": t,
        "n_fallback": n_fallback,
        "n_solve_failures": n_failed,
        "ledger": env.storage_ledger(),
        "rows": rows,
    }


@dataclass
class TrainResult:
    best_model: koopman.KoopmanModel
    best_reward: float
    best_round: int
    curve: list                    # dict rows, one per evaluation
    critic: Critic
    env_steps: int


def train(env_factory, model: koopman.KoopmanModel, cfg: PpoConfig,
          ocp_cfg: OcpConfig, total_steps: int, eval_env_factory=None,
          eval_seed: int = 0, seed: int = 0, log=None) -> TrainResult:
    """Alternate rollout collection and PPO updates; track the best policy.

    Evaluation is a deterministic episode after every update round (and one
    before any training), scored by average reward; the returned snapshot
    is the argmax over those evaluations.
    """
    rng = np.random.default_rng(seed)
    envs = [env_factory(i) for i in range(cfg.n_actors)]
    policies = [EnmpcPolicy(model, ocp_cfg) for _ in range(cfg.n_actors)]
    obs_list = [env.reset(seed + 101 * (i + 1))
                for i, env in enumerate(envs)]
    critic = Critic(envs[0].n_obs, cfg.critic_hidden, seed=seed + 1)
    opt_policy = Adam(koopman.n_params(model), lr=cfg.lr)
    opt_critic = Adam(critic.n_params, lr=cfg.lr)

    def run_eval():
        env = eval_env_factory() if eval_env_factory else env_factory(0)
        metrics = evaluate_policy(EnmpcPolicy(model, ocp_cfg), env,
                                  reset_seed=eval_seed)
        metrics.pop("rows")
        return metrics

    curve = []
    env_steps = 0
    update_idx = 0
    metrics = run_eval()
    best_reward = metrics["avg_reward"]
    best_model = model.copy()
    best_round = 0
    curve.append({"update": 0, "env_steps": 0, **metrics})
    if log:
        log(curve[-1])

    while env_steps < total_steps:
        buffer, obs_list = collect_rollouts(envs, policies, obs_list,
                                            critic, cfg, ocp_cfg, rng)
        env_steps += len(buffer)
        stats = ppo_update(model, critic, buffer, cfg, ocp_cfg,
                           opt_policy, opt_critic, rng)
        update_idx += 1
        metrics = run_eval()
        row = {"update": update_idx, "env_steps": env_steps, **metrics,
               **{f"train_{k}": v for k, v in stats.items()}}
        curve.append(row)
        if log:
            log(row)
        if metrics["avg_reward"] > best_reward:
            best_reward = metrics["avg_reward"]
            best_model = model.copy()
            best_round = update_idx
    return TrainResult(best_model, best_reward, best_round, curve, critic,
                       env_steps)


# ---------------------------------------------------------------------------
# Checkpoints

def _pack_model(prefix: str, model: koopman.KoopmanModel, payload: dict):
    payload[f"{prefix}_dims"] = model.dims.as_array()
    payload[f"{prefix}_dt"] = np.array(model.dt_model)
    payload[f"{prefix}_nlayers"] = np.array(len(model.enc_weights))
    for i, (w, b) in enumerate(zip(model.enc_weights, model.enc_biases)):
        payload[f"{prefix}_w{i}"] = w
        payload[f"{prefix}_b{i}"] = b
    for name in "ABCDE":
        payload[f"{prefix}_{name}"] = getattr(model, name)


def _unpack_model(prefix: str, data) -> koopman.KoopmanModel:
    n_layers = int(data[f"{prefix}_nlayers"])
    return koopman.KoopmanModel(
        [data[f"{prefix}_w{i}"] for i in range(n_layers)],
        [data[f"{prefix}_b{i}"] for i in range(n_layers)],
        A=data[f"{prefix}_A"], B=data[f"{prefix}_B"],
        C=data[f"{prefix}_C"], D=data[f"{prefix}_D"],
        E=data[f"{prefix}_E"],
        dt_model=float(data[f"{prefix}_dt"]),
        dims=koopman.ModelDims.from_array(data[f"{prefix}_dims"]))


def save_checkpoint(path, model, critic: Critic, opt_policy: Adam,
                    opt_critic: Adam, rng, best_model=None,
                    best_reward: float = -np.inf, extra: dict | None = None):
    payload = {"ckpt_version": np.array(CHECKPOINT_VERSION),
               "best_reward": np.array(best_reward),
               "rng_state": np.array(json.dumps(rng.bit_generator.state))}
    _pack_model("model", model, payload)
    _pack_model("best", best_model if best_model is not None else model,
                payload)
    payload["critic"] = critic.flatten()
    payload["critic_sizes"] = np.array(
        [w.shape[1] for w in critic.weights] + [1])
    for name, opt in (("optp", opt_policy), ("optc", opt_critic)):
        st = opt.state_dict()
        payload[f"{name}_m"] = st["m"]
        payload[f"{name}_v"] = st["v"]
        payload[f"{name}_t"] = st["t"]
        payload[f"{name}_lr"] = np.array(opt.lr)
    if extra:
        payload["extra"] = np.array(json.dumps(extra))
    np.savez(path, **payload)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["ckpt_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        model = _unpack_model("model", data)
        best_model = _unpack_model("best", data)
        sizes = [int(v) for v in data["critic_sizes"]]
        critic = Critic(sizes[0], tuple(sizes[1:-1]))
        critic.load_flat(data["critic"])
        out = {"model": model, "best_model": best_model, "critic": critic,
               "best_reward": float(data["best_reward"]),
               "rng_state": json.loads(str(data["rng_state"]))}
        for name in ("optp", "optc"):
            opt = Adam(int(data[f"{name}_m"].shape[0]),
                       lr=float(data[f"{name}_lr"]))
            opt.load_state_dict({"m": data[f"{name}_m"],
                                 "v": data[f"{name}_v"],
                                 "t": data[f"{name}_t"]})
            out[name] = opt
        if "extra" in data:
            out["extra"] = json.loads(str(data["extra"]))
    return out


class PpoTrainer(BaseEstimator):
    """Estimator-style wrapper: fit() refines a model on an environment."""

    def __init__(self, total_steps=10000, n_actors=2, t_ppo=64,
                 minibatch=64, epochs=4, lr=1e-4, gamma=0.98,
                 lam_gae=0.95, clip_eps=0.2, seed=0):
        self.total_steps = total_steps
        self.n_actors = n_actors
        self.t_ppo = t_ppo
        self.minibatch = minibatch
        self.epochs = epochs
        self.lr = lr
        self.gamma = gamma
        self.lam_gae = lam_gae
        self.clip_eps = clip_eps
        self.seed = seed

    def fit(self, env_factory, model, ocp_cfg, eval_env_factory=None):
        cfg = PpoConfig(gamma=self.gamma, lam_gae=self.lam_gae,
                        clip_eps=self.clip_eps, n_actors=self.n_actors,
                        t_ppo=self.t_ppo, minibatch=self.minibatch,
                        epochs=self.epochs, lr=self.lr)
        self.result_ = train(env_factory, model.copy(), cfg, ocp_cfg,
                             self.total_steps,
                             eval_env_factory=eval_env_factory,
                             seed=self.seed)
        self.model_ = self.result_.best_model
        return self

    def predict(self, obs, ocp_cfg):
        if not hasattr(self, "model_"):
            raise RuntimeError("trainer is not fitted")
        action, _ = EnmpcPolicy(self.model_, ocp_cfg).predict(obs)
        return action
