"""Policy-optimization machinery: advantage estimation against a brute-force
oracle, Gaussian density math, critic gradients, rollout bookkeeping,
checkpoint fidelity, and a miniature end-to-end training run."""
import numpy as np
import pytest
from scipy import stats

from conftest import make_structured_model
from koopmpc.env import DemandResponseEnv
from koopmpc.koopman import flatten
from koopmpc.ocp import OcpConfig
from koopmpc.optim import Adam
from koopmpc.plant import SurrogatePlant, default_scaler
from koopmpc.policy import EnmpcPolicy
from koopmpc.prices import synthetic_reference
from koopmpc.rl import (Critic, PpoConfig, PpoTrainer, RolloutBuffer, act,
                        evaluate_policy, gae, gaussian_entropy,
                        gaussian_logp, load_checkpoint, save_checkpoint,
                        train)


def gae_brute_force(rewards, values, dones, gamma, lam):
    """Direct truncated-sum evaluation of the advantage definition."""
    t_len = len(rewards)
    adv = np.zeros(t_len)
    for t in range(t_len):
        acc, w = 0.0, 1.0
        for k in range(t, t_len):
            nonterm = 0.0 if dones[k] else 1.0
            acc += w * (rewards[k] + gamma * values[k + 1] * nonterm
                        - values[k])
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


class TestGae:
    def test_matches_brute_force_on_random_sequences(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t_len = int(rng.integers(1, 50))
            rewards = rng.standard_normal(t_len)
            values = rng.standard_normal(t_len + 1)
            dones = rng.random(t_len) < 0.15
            gamma = float(rng.uniform(0.9, 1.0))
            lam = float(rng.uniform(0.8, 1.0))
            adv, ret = gae(rewards, values, dones, gamma, lam)
            want = gae_brute_force(rewards, values, dones, gamma, lam)
            np.testing.assert_allclose(adv, want, atol=1e-12)
            np.testing.assert_allclose(ret, adv + values[:t_len],
                                       atol=1e-12)

    def test_constant_rewards_give_geometric_advantages(self):
        t_len, gamma, lam = 6, 0.9, 0.8
        adv, _ = gae(np.ones(t_len), np.zeros(t_len + 1),
                     np.zeros(t_len, dtype=bool), gamma, lam)
        q = gamma * lam
        want = [(1 - q ** (t_len - t)) / (1 - q) for t in range(t_len)]
        np.testing.assert_allclose(adv, want, atol=1e-12)

    def test_done_flag_cuts_the_recursion(self):
        rewards = np.array([1.0, 1.0, 1.0, 1.0])
        values = np.zeros(5)
        dones = np.array([False, True, False, False])
        adv, _ = gae(rewards, values, dones, 1.0, 1.0)
        np.testing.assert_allclose(adv, [2.0, 1.0, 2.0, 1.0])

    def test_length_validation(self):
        with pytest.raises(ValueError):
            gae(np.zeros(3), np.zeros(3), np.zeros(3, dtype=bool), 0.9, 0.9)


class TestGaussian:
    def test_logp_matches_reference_density(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal(4)
            m = rng.standard_normal(4)
            s = rng.uniform(0.05, 0.5, 4)
            want = float(np.sum(stats.norm.logpdf(a, m, s)))
            assert gaussian_logp(a, m, s) == pytest.approx(want, rel=1e-12)

    def test_entropy_matches_reference(self):
        s = np.array([0.15, 0.15, 0.15, 0.15])
        want = float(np.sum([stats.norm.entropy(0.0, si) for si in s]))
        assert gaussian_entropy(s) == pytest.approx(want, rel=1e-12)


class TestCritic:
    def test_value_batches_agree_with_single_samples(self):
        critic = Critic(6, hidden=(8, 8), seed=0)
        rng = np.random.default_rng(0)
        obs = rng.standard_normal((5, 6))
        batch = critic.value(obs)
        singles = [critic.value(o[None, :])[0] for o in obs]
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_gradient_matches_finite_difference(self):
        critic = Critic(5, hidden=(8,), seed=1)
        rng = np.random.default_rng(2)
        obs = rng.standard_normal((12, 5))
        targets = rng.standard_normal(12)
        loss, grad = critic.loss_and_grad(obs, targets)
        theta = critic.flatten()
        assert grad.shape == theta.shape
        direction = rng.standard_normal(theta.size)
        direction /= np.linalg.norm(direction)
        h = 1e-6
        probe = Critic(5, hidden=(8,), seed=1)
        probe.load_flat(theta + h * direction)
        lp, _ = probe.loss_and_grad(obs, targets)
        probe.load_flat(theta - h * direction)
        lm, _ = probe.loss_and_grad(obs, targets)
        num = (lp - lm) / (2 * h)
        assert num == pytest.approx(float(grad @ direction), rel=1e-5,
                                    abs=1e-9)

    def test_flatten_load_round_trip(self):
        critic = Critic(4, hidden=(6, 6), seed=3)
        theta = critic.flatten()
        other = Critic(4, hidden=(6, 6), seed=9)
        other.load_flat(theta)
        np.testing.assert_array_equal(other.flatten(), theta)
        rng = np.random.default_rng(0)
        obs = rng.standard_normal((3, 4))
        np.testing.assert_allclose(other.value(obs), critic.value(obs),
                                   atol=1e-15)

    def test_wrong_parameter_length_rejected(self):
        critic = Critic(4, hidden=(6,), seed=0)
        with pytest.raises(ValueError):
            critic.load_flat(np.zeros(critic.n_params + 1))


class TestRolloutBuffer:
    def test_finalize_matches_direct_gae_per_actor(self):
        rng = np.random.default_rng(4)
        cfg = PpoConfig(n_actors=2, t_ppo=6, minibatch=6, epochs=1,
                        normalize_adv=False)
        critic = Critic(3, hidden=(4,), seed=0)
        buf = RolloutBuffer()
        for a in range(2):
            start = len(buf.actions)
            for _ in range(6):
                buf.obs_vec.append(rng.standard_normal(3))
                buf.actions.append(rng.standard_normal(4))
                buf.rewards.append(float(rng.standard_normal()))
                buf.dones.append(bool(rng.random() < 0.2))
                buf.logp.append(0.0)
                buf.ok.append(True)
                buf.warm.append(None)
            buf.bootstrap_obs_vec.append(rng.standard_normal(3))
            buf.actor_bounds.append((start, len(buf.actions)))
        buf.rewards = np.asarray(buf.rewards)
        buf.dones = np.asarray(buf.dones)
        buf.logp = np.asarray(buf.logp)
        buf.finalize(critic, cfg)
        values = critic.value(np.array(buf.obs_vec))
        boot = critic.value(np.array(buf.bootstrap_obs_vec))
        for a, (lo, hi) in enumerate(buf.actor_bounds):
            vals = np.concatenate([values[lo:hi], [boot[a]]])
            adv, ret = gae(buf.rewards[lo:hi], vals, buf.dones[lo:hi],
                           cfg.gamma, cfg.lam_gae)
            np.testing.assert_allclose(buf.advantages[lo:hi], adv,
                                       atol=1e-12)
            np.testing.assert_allclose(buf.returns[lo:hi], ret, atol=1e-12)

    def test_advantage_normalization(self):
        rng = np.random.default_rng(5)
        cfg = PpoConfig(n_actors=1, t_ppo=32, minibatch=32, epochs=1,
                        normalize_adv=True)
        critic = Critic(3, hidden=(4,), seed=0)
        buf = RolloutBuffer()
        for _ in range(32):
            buf.obs_vec.append(rng.standard_normal(3))
            buf.rewards.append(float(rng.standard_normal()))
            buf.dones.append(False)
            buf.actions.append(np.zeros(4))
            buf.logp.append(0.0)
            buf.ok.append(True)
            buf.warm.append(None)
        buf.bootstrap_obs_vec.append(rng.standard_normal(3))
        buf.actor_bounds.append((0, 32))
        buf.rewards = np.asarray(buf.rewards)
        buf.dones = np.asarray(buf.dones)
        buf.logp = np.asarray(buf.logp)
        buf.finalize(critic, cfg)
        assert abs(buf.advantages.mean()) < 1e-12
        assert buf.advantages.std() == pytest.approx(1.0, abs=1e-12)


class TestConfigValidation:
    def test_gamma_bounds(self):
        with pytest.raises(ValueError):
            PpoConfig(gamma=0.0)

    def test_minibatch_must_divide_batch(self):
        with pytest.raises(ValueError):
            PpoConfig(n_actors=3, t_ppo=64, minibatch=100)

    def test_clip_must_be_positive(self):
        with pytest.raises(ValueError):
            PpoConfig(clip_eps=0.0)


def small_ocp_cfg():
    return OcpConfig(default_scaler(), horizon=6, solver_max_iter=60)


def make_small_env(seed=0, episode_steps=8):
    return DemandResponseEnv(
        SurrogatePlant(), synthetic_reference(48, seed=1),
        episode_steps=episode_steps, random_start=False, seed=seed)


def small_model():
    m = make_structured_model(7, n_z=6, dt=15.0)
    # soften the output maps so the random model behaves like a plausible
    # controller target
    m.C = 0.3 * m.C
    m.D = 0.3 * m.D
    m.E = 0.3 * m.E
    return m


class TestActAndEvaluate:
    def test_act_returns_consistent_log_probability(self):
        model = small_model()
        policy = EnmpcPolicy(model, small_ocp_cfg())
        env = make_small_env()
        obs = env.reset(seed=0)
        rng = np.random.default_rng(0)
        sigma = np.full(4, 0.15)
        action, logp, info = act(policy, obs, sigma, rng)
        mean, _ = EnmpcPolicy(model, small_ocp_cfg()).predict(obs)
        assert logp == pytest.approx(gaussian_logp(action, mean, sigma),
                                     abs=1e-6)
        assert info["ok"]

    def test_evaluation_is_deterministic_apart_from_timing(self):
        model = small_model()
        policy = EnmpcPolicy(model, small_ocp_cfg())
        a = evaluate_policy(policy, make_small_env(), reset_seed=3)
        b = evaluate_policy(policy, make_small_env(), reset_seed=3)
        skip = {k for k in a if k.startswith("solve_time")}
        for key in a.keys() - skip - {"rows", "ledger"}:
            assert a[key] == b[key], key
        assert a["ledger"] == b["ledger"]
        np.testing.assert_array_equal(np.array(a["rows"]),
                                      np.array(b["rows"]))

    def test_evaluation_ledger_closes(self):
        model = small_model()
        metrics = evaluate_policy(EnmpcPolicy(model, small_ocp_cfg()),
                                  make_small_env(), reset_seed=0)
        led = metrics["ledger"]
        drift = abs(led["ns_end"] - led["ns_start"] - led["flow_sum"]
                    - led["clip_sum"])
        assert drift <= 1e-12
        assert metrics["n_steps"] == 8


class TestCheckpoint:
    def test_round_trip_restores_everything(self, tmp_path):
        model = make_structured_model(3, n_z=5, dt=15.0)
        best = make_structured_model(4, n_z=5, dt=15.0)
        critic = Critic(7, hidden=(6,), seed=0)
        opt_p = Adam(flatten(model).size, lr=3e-4)
        opt_c = Adam(critic.n_params, lr=1e-3)
        rng = np.random.default_rng(12)
        # advance optimizers and rng so there is real state to preserve
        opt_p.step(flatten(model), np.ones(flatten(model).size))
        opt_c.step(critic.flatten(), np.ones(critic.n_params))
        rng.standard_normal(5)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model, critic, opt_p, opt_c, rng,
                        best_model=best, best_reward=0.125,
                        extra={"round": 3})
        back = load_checkpoint(path)
        np.testing.assert_array_equal(flatten(back["model"]),
                                      flatten(model))
        np.testing.assert_array_equal(flatten(back["best_model"]),
                                      flatten(best))
        np.testing.assert_array_equal(back["critic"].flatten(),
                                      critic.flatten())
        assert back["best_reward"] == 0.125
        assert back["extra"] == {"round": 3}
        for name, opt in (("optp", opt_p), ("optc", opt_c)):
            st, st_back = opt.state_dict(), back[name].state_dict()
            np.testing.assert_array_equal(st_back["m"], st["m"])
            np.testing.assert_array_equal(st_back["v"], st["v"])
            assert int(st_back["t"]) == int(st["t"])
            assert back[name].lr == opt.lr
        rng2 = np.random.default_rng(0)
        rng2.bit_generator.state = back["rng_state"]
        np.testing.assert_array_equal(rng2.standard_normal(4),
                                      rng.standard_normal(4))

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, ckpt_version=np.array(99))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestTraining:
    def test_micro_training_run_tracks_best_policy(self):
        model = small_model()
        cfg = PpoConfig(n_actors=1, t_ppo=8, minibatch=8, epochs=1,
                        sigma=(0.15,) * 4)
        logged = []
        result = train(lambda i: make_small_env(seed=10 + i), model, cfg,
                       small_ocp_cfg(), total_steps=16,
                       eval_env_factory=lambda: make_small_env(seed=50),
                       eval_seed=0, seed=0, log=logged.append)
        assert result.env_steps == 16
        assert len(result.curve) == 3      # pre-training eval plus 2 rounds
        rewards = [row["avg_reward"] for row in result.curve]
        assert result.best_reward == pytest.approx(max(rewards))
        assert result.curve[result.best_round]["avg_reward"] == \
            pytest.approx(result.best_reward)
        for row in result.curve:
            assert {"update", "env_steps", "avg_reward",
                    "violation_fraction", "savings_fraction"} <= set(row)
        assert result.curve[-1]["train_n_minibatches"] == 1
        assert logged == result.curve
        assert flatten(result.best_model).shape == flatten(model).shape


class TestTrainerEstimator:
    def test_get_params_round_trip(self):
        est = PpoTrainer(total_steps=8, n_actors=1, t_ppo=8, minibatch=8)
        params = est.get_params()
        clone = PpoTrainer(**params)
        assert clone.get_params() == params

    def test_predict_requires_fit(self):
        with pytest.raises(RuntimeError, match="not fitted"):
            PpoTrainer().predict(None, small_ocp_cfg())

    def test_micro_fit_produces_a_model(self):
        est = PpoTrainer(total_steps=8, n_actors=1, t_ppo=8, minibatch=8,
                         epochs=1, seed=0)
        est.fit(lambda i: make_small_env(seed=20 + i), small_model(),
                small_ocp_cfg())
        env = make_small_env(seed=33)
        action = est.predict(env.reset(seed=0), small_ocp_cfg())
        assert action.shape == (4,)
        assert np.all(np.isfinite(action))
