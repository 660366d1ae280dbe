"""End-to-end tests for the command-line pipeline.

Exercises every subcommand through ``main(argv)`` in-process: exit codes
for usage and runtime failures, the price tooling, and a miniature
sysid -> train -> eval run whose artifacts (models, datasets, CSV reports)
are checked for presence, headers, config-hash stamps, and reproducibility.
"""
import numpy as np
import pytest

from koopmpc import koopman
from koopmpc import rl as rlmod
from koopmpc.cli import CURVE_COLUMNS, main
from koopmpc.config import load_config
from koopmpc.optim import Adam
from koopmpc.prices import load_prices
from koopmpc.sysid import SIDataset

MINI_YAML = """\
seed: 0
out_dir: {out}
prices:
  synthetic:
    hours: 168
    seed: 10
  eval_hours: 48
  eval_seed: 99
ocp:
  horizon: 4
si:
  n_random_steps: 400
  rollout_steps: 16
  max_iterations: 1
  stop_patience: 2
  fit:
    horizon: 8
    epochs: 8
    batch_size: 128
    patience: 4
ppo:
  n_actors: 2
  t_ppo: 16
  minibatch: 16
  epochs: 1
train:
  total_steps: 64
  seeds: [1]
  episode_steps: 16
eval:
  episode_steps: 16
"""


def read_stamped_csv(path):
    """Return (config_hash, header, rows) from a hash-stamped CSV."""
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config ")
    stamp = lines[0].split()[-1]
    header = lines[1].split(",")
    rows = [line.split(",") for line in lines[2:]]
    return stamp, header, rows


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "sysid" in capsys.readouterr().out

    def test_no_arguments_is_usage_error(self, capsys):
        assert main([]) == 1

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1

    @pytest.mark.parametrize("cmd", ["sysid", "train", "eval"])
    def test_missing_config_file_is_usage_error(self, cmd, capsys):
        argv = [cmd, "--config", "/nonexistent/cfg.yaml"]
        if cmd in ("train", "eval"):
            argv += ["--model", "/nonexistent/model.npz"]
        assert main(argv) == 1

    def test_invalid_config_content_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("bogus_key: 3\n")
        assert main(["sysid", "--config", str(bad)]) == 2

    def test_invalid_config_value_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("ocp:\n  delta: 5.0\n")
        assert main(["sysid", "--config", str(bad)]) == 2


class TestPricesCommand:
    def test_generate_then_validate(self, tmp_path, capsys):
        out = tmp_path / "p.csv"
        code = main(["prices", "generate", "--out", str(out),
                     "--hours", "72", "--seed", "3",
                     "--mean", "37.5", "--std", "9.0"])
        assert code == 0
        series = load_prices(out)
        assert series.n_hours == 72
        # file storage rounds to 10 significant digits
        assert abs(series.mean() - 37.5) < 1e-6
        assert abs(series.var() - 81.0) < 1e-6
        assert main(["prices", "validate", "--file", str(out)]) == 0
        assert "ok: 72 hourly prices" in capsys.readouterr().out

    def test_generate_requires_out(self, capsys):
        assert main(["prices", "generate"]) == 1

    def test_validate_requires_file(self, capsys):
        assert main(["prices", "validate"]) == 1

    def test_validate_corrupt_csv_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("time,price\nfoo,bar\n")
        assert main(["prices", "validate", "--file", str(bad)]) == 2

    def test_generate_from_reference_preserves_moments(self, tmp_path,
                                                       capsys):
        ref = tmp_path / "ref.csv"
        main(["prices", "generate", "--out", str(ref), "--hours", "96",
              "--seed", "1", "--mean", "55.0", "--std", "11.0"])
        gen = tmp_path / "gen.csv"
        code = main(["prices", "generate", "--out", str(gen),
                     "--reference", str(ref), "--hours", "240",
                     "--seed", "7"])
        assert code == 0
        ref_s, gen_s = load_prices(ref), load_prices(gen)
        assert gen_s.n_hours == 240
        assert abs(gen_s.mean() - ref_s.mean()) < 1e-6
        assert abs(gen_s.var() - ref_s.var()) < 1e-6


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Miniature sysid -> train -> eval run shared by the artifact tests."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    out = root / "run"
    cfg_path = root / "mini.yaml"
    cfg_path.write_text(MINI_YAML.format(out=out))
    codes = {"sysid": main(["sysid", "--config", str(cfg_path)])}
    model15 = out / "si_model_15min.npz"
    codes["train"] = main(["train", "--config", str(cfg_path),
                           "--model", str(model15)])
    best = out / "ppo_best_seed1.npz"
    codes["eval_ppo"] = main(["eval", "--config", str(cfg_path),
                              "--model", str(best),
                              "--mode", "koopman-ppo"])
    codes["eval_si"] = main(["eval", "--config", str(cfg_path),
                             "--model", str(model15),
                             "--mode", "koopman-si"])
    cfg = load_config(cfg_path)
    return {"cfg_path": cfg_path, "out": out, "codes": codes,
            "hash": cfg.hash(), "cfg": cfg}


class TestPipelineArtifacts:
    def test_all_commands_succeed(self, pipeline):
        assert pipeline["codes"] == {"sysid": 0, "train": 0,
                                     "eval_ppo": 0, "eval_si": 0}

    def test_sysid_writes_models_at_both_rates(self, pipeline):
        out = pipeline["out"]
        fine = koopman.load_model(out / "si_model_5min.npz")
        coarse = koopman.load_model(out / "si_model_15min.npz")
        assert fine.dt_model == pytest.approx(5.0)
        assert coarse.dt_model == pytest.approx(15.0)
        # the packaged coarse model is exactly the upscaled fine model
        expect = koopman.upscale(fine, 3)
        np.testing.assert_allclose(coarse.A, expect.A, atol=1e-14)
        np.testing.assert_allclose(coarse.E, expect.E, atol=1e-14)

    def test_sysid_dataset_holds_random_and_rollout_data(self, pipeline):
        ds = SIDataset.load(pipeline["out"] / "si_dataset.npz")
        assert ds.n_steps == 400 + 16 * 3
        sources = {t.source for t in ds.trajectories}
        assert sources == {"random", "enmpc_rollout"}

    def test_sysid_history_stamped_and_shaped(self, pipeline):
        stamp, header, rows = read_stamped_csv(
            pipeline["out"] / "si_history.csv")
        assert stamp == pipeline["hash"]
        assert header == ["iteration", "val_loss", "avg_reward",
                          "n_steps_data", "fallbacks"]
        assert len(rows) == 1
        assert rows[0][0] == "0"
        assert float(rows[0][3]) == 400

    def test_train_curve_columns_and_length(self, pipeline):
        stamp, header, rows = read_stamped_csv(
            pipeline["out"] / "ppo_curve_seed1.csv")
        assert stamp == pipeline["hash"]
        assert header == CURVE_COLUMNS
        # 64 total steps / (2 actors * 16 steps) = 2 updates, plus round 0
        assert len(rows) == 3
        assert [int(r[0]) for r in rows] == [0, 1, 2]
        assert [int(r[1]) for r in rows] == [0, 32, 64]

    def test_train_summary_matches_curve(self, pipeline):
        stamp, header, rows = read_stamped_csv(
            pipeline["out"] / "train_summary.csv")
        assert stamp == pipeline["hash"]
        assert header == ["seed", "best_eval_reward", "best_round",
                          "env_steps"]
        assert len(rows) == 1 and rows[0][0] == "1"
        _, _, curve = read_stamped_csv(
            pipeline["out"] / "ppo_curve_seed1.csv")
        best = max(float(r[2]) for r in curve)
        assert float(rows[0][1]) == pytest.approx(best, rel=1e-9)
        assert int(rows[0][3]) == 64

    def test_train_saves_loadable_best_model(self, pipeline):
        model = koopman.load_model(pipeline["out"] / "ppo_best_seed1.npz")
        assert model.A.shape == (10, 10)
        assert model.dt_model == pytest.approx(15.0)

    @pytest.mark.parametrize("tag", ["koopman_ppo", "koopman_si"])
    def test_eval_writes_metrics_and_trajectory(self, pipeline, tag):
        out = pipeline["out"]
        stamp, header, rows = read_stamped_csv(
            out / f"eval_metrics_{tag}.csv")
        assert stamp == pipeline["hash"]
        assert header == sorted(header)
        for key in ("avg_reward", "violation_fraction", "savings_fraction",
                    "total_cost", "steady_cost", "solve_time_mean"):
            assert key in header
        assert len(rows) == 1
        stamp2, theader, trows = read_stamped_csv(
            out / f"eval_trajectory_{tag}.csv")
        assert stamp2 == pipeline["hash"]
        assert theader[0] == "t"
        assert len(trows) == 16
        n_steps = int(rows[0][header.index("n_steps")])
        assert n_steps == 16

    def test_eval_mode_selects_band_enforcement(self, pipeline, monkeypatch,
                                                tmp_path, capsys):
        import koopmpc.cli as climod
        seen = []
        real = climod.EnmpcPolicy

        class Recorder(real):
            def __init__(self, model, cfg, mode="slack_penalty", **kw):
                seen.append(mode)
                super().__init__(model, cfg, mode=mode, **kw)

        monkeypatch.setattr(climod, "EnmpcPolicy", Recorder)
        model = pipeline["out"] / "si_model_15min.npz"
        code = main(["eval", "--config", str(pipeline["cfg_path"]),
                     "--model", str(model), "--mode", "koopman-si",
                     "--out", str(tmp_path)])
        assert code == 0
        assert seen == ["hard"]
        seen.clear()
        code = main(["eval", "--config", str(pipeline["cfg_path"]),
                     "--model", str(model), "--mode", "koopman-ppo",
                     "--out", str(tmp_path)])
        assert code == 0
        assert seen == ["slack_penalty"]

    def test_eval_prints_storage_ledger_drift(self, pipeline, tmp_path,
                                              capsys):
        model = pipeline["out"] / "si_model_15min.npz"
        code = main(["eval", "--config", str(pipeline["cfg_path"]),
                     "--model", str(model), "--out", str(tmp_path)])
        assert code == 0
        out_text = capsys.readouterr().out
        line = [ln for ln in out_text.splitlines()
                if ln.startswith("storage_ledger_drift=")]
        assert len(line) == 1
        assert float(line[0].split("=")[1]) < 1e-10


class TestEvalReproducibility:
    def test_repeat_runs_identical_apart_from_timings(self, pipeline,
                                                      tmp_path, capsys):
        model = pipeline["out"] / "ppo_best_seed1.npz"
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            code = main(["eval", "--config", str(pipeline["cfg_path"]),
                         "--model", str(model), "--out", str(d)])
            assert code == 0
        t_a = (dirs[0] / "eval_trajectory_koopman_ppo.csv").read_bytes()
        t_b = (dirs[1] / "eval_trajectory_koopman_ppo.csv").read_bytes()
        assert t_a == t_b
        results = [read_stamped_csv(d / "eval_metrics_koopman_ppo.csv")
                   for d in dirs]
        header = results[0][1]
        assert results[1][1] == header
        for name, va, vb in zip(header, results[0][2][0], results[1][2][0]):
            if not name.startswith("solve_time"):
                assert va == vb, name


class TestCheckpointInput:
    def test_eval_accepts_training_checkpoint(self, pipeline, tmp_path,
                                              capsys):
        """A full training checkpoint works anywhere a model file does."""
        out = pipeline["out"]
        model = koopman.load_model(out / "ppo_best_seed1.npz")
        critic = rlmod.Critic(6, hidden=(8,), seed=0)
        ckpt = tmp_path / "ckpt.npz"
        rlmod.save_checkpoint(
            ckpt, model, critic, Adam(koopman.n_params(model)),
            Adam(critic.n_params), np.random.default_rng(0),
            best_model=model, best_reward=0.5)
        code = main(["eval", "--config", str(pipeline["cfg_path"]),
                     "--model", str(ckpt), "--out", str(tmp_path)])
        assert code == 0
        traj = (tmp_path / "eval_trajectory_koopman_ppo.csv").read_bytes()
        ref = (out / "eval_trajectory_koopman_ppo.csv").read_bytes()
        assert traj == ref


class TestTrainSeedFlag:
    def test_single_seed_overrides_configured_list(self, pipeline, tmp_path,
                                                   capsys):
        model = pipeline["out"] / "si_model_15min.npz"
        code = main(["train", "--config", str(pipeline["cfg_path"]),
                     "--model", str(model), "--seed", "2",
                     "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "ppo_curve_seed2.csv").exists()
        assert not (tmp_path / "ppo_curve_seed1.csv").exists()
        _, _, rows = read_stamped_csv(tmp_path / "train_summary.csv")
        assert [r[0] for r in rows] == ["2"]
