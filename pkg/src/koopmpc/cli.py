"""Command-line pipeline: price tooling, system identification, policy
refinement, and evaluation.

Every command is driven by one YAML configuration file plus a few
overriding flags; all artifacts (models, datasets, CSV reports) land in the
configured output directory and carry the configuration hash. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import koopman
from . import rl as rlmod
from .config import RunConfig, load_config
from .env import DemandResponseEnv, write_trajectory
from .policy import EnmpcPolicy
from .prices import gen_prices, load_prices, save_prices, synthetic_reference
from .sysid import iterative_si


def _write_csv(path, header, rows, config_hash=None):
    with open(path, "w") as f:
        if config_hash:
            f.write(f"# config {config_hash}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return f"{v:.10g}"
    return str(v)


def _load_run(config_path, seed, out):
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    out_dir = Path(out) if out else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def _make_eval_env(cfg: RunConfig, prices):
    return DemandResponseEnv(
        cfg.make_plant(), prices, cfg.reward,
        dt_minutes=cfg.ocp.dt_minutes, demand_rate=cfg.ocp.demand_rate,
        episode_steps=cfg.eval.episode_steps, random_start=False)


def _load_policy_model(path) -> koopman.KoopmanModel:
    """A model file or a training checkpoint (best snapshot)."""
    try:
        return koopman.load_model(path)
    except KeyError:
        return rlmod.load_checkpoint(path)["best_model"]


@click.group()
def cli():
    """Koopman-model predictive control training pipeline."""


@cli.command("prices")
@click.argument("action", type=click.Choice(["generate", "validate"]))
@click.option("--file", "file_", type=click.Path(), default=None,
              help="price CSV to validate")
@click.option("--reference", type=click.Path(exists=True), default=None,
              help="reference CSV whose statistics the generator preserves")
@click.option("--out", type=click.Path(), default=None)
@click.option("--hours", type=int, default=24 * 28)
@click.option("--seed", type=int, default=0)
@click.option("--mean", type=float, default=50.0)
@click.option("--std", type=float, default=12.0)
def cmd_prices(action, file_, reference, out, hours, seed, mean, std):
    """Generate a synthetic hourly price CSV, or validate an existing one."""
    if action == "validate":
        if not file_:
            raise click.UsageError("validate needs --file")
        series = load_prices(file_)
        click.echo(f"ok: {series.n_hours} hourly prices, "
                   f"mean {series.mean():.2f}, var {series.var():.2f}")
        return
    if not out:
        raise click.UsageError("generate needs --out")
    if reference:
        ref = load_prices(reference)
        series = gen_prices(ref, hours, seed)
    else:
        series = synthetic_reference(hours, seed, mean, std)
    save_prices(out, series)
    click.echo(f"wrote {hours} hourly prices to {out}")


@cli.command("sysid")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def cmd_sysid(config_path, seed, out):
    """Iterative data sampling and model fitting; writes the best model."""
    cfg, out_dir = _load_run(config_path, seed, out)
    plant = cfg.make_plant()
    prices = cfg.reference_prices()
    rows = []

    def log(row):
        click.echo(f"[sysid] iteration {row['iteration']}: "
                   f"val_loss={row['val_loss']:.3e} "
                   f"avg_reward={row['avg_reward']:.4f}")

    model, history, dataset = iterative_si(
        plant, prices, cfg.model_dims(), cfg.si, cfg.ocp_config(),
        cfg.reward, seed=cfg.seed, log=log)
    koopman.save_model(out_dir / "si_model_5min.npz", model)
    model15 = koopman.upscale(model, cfg.si.upscale_k)
    koopman.save_model(out_dir / "si_model_15min.npz", model15)
    dataset.save(out_dir / "si_dataset.npz")
    for row in history:
        rows.append([row["iteration"], row["val_loss"], row["avg_reward"],
                     row["n_steps_data"], row["fallbacks"]])
    _write_csv(out_dir / "si_history.csv",
               ["iteration", "val_loss", "avg_reward", "n_steps_data",
                "fallbacks"], rows, cfg.hash())
    click.echo(f"wrote {out_dir}/si_model_15min.npz "
               f"({len(history)} iterations)")


CURVE_COLUMNS = ["update", "env_steps", "avg_reward",
                 "violation_fraction", "savings_fraction"]


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--model", "model_path", type=click.Path(exists=True),
              required=True, help="coarse-step model from sysid")
@click.option("--seed", type=int, default=None,
              help="train a single seed instead of the configured list")
@click.option("--out", type=click.Path(), default=None)
def cmd_train(config_path, model_path, seed, out):
    """Policy-gradient refinement for each configured seed."""
    cfg, out_dir = _load_run(config_path, None, out)
    base_model = koopman.load_model(model_path)
    plant = cfg.make_plant()
    train_prices = cfg.reference_prices()
    eval_prices = cfg.eval_prices()
    seeds = [seed] if seed is not None else list(cfg.train.seeds)
    summary = []
    for s in seeds:
        def env_factory(i, _s=s):
            return DemandResponseEnv(
                cfg.make_plant(), train_prices, cfg.reward,
                dt_minutes=cfg.ocp.dt_minutes,
                demand_rate=cfg.ocp.demand_rate,
                episode_steps=cfg.train.episode_steps, seed=_s * 1000 + i)

        def eval_env_factory():
            return _make_eval_env(cfg, eval_prices)

        def log(row):
            click.echo(f"[train seed {s}] update {row['update']} "
                       f"steps {row['env_steps']} "
                       f"eval_reward={row['avg_reward']:.4f} "
                       f"viol={row['violation_fraction']:.3f}")

        try:
            result = rlmod.train(
                env_factory, base_model.copy(), cfg.ppo, cfg.ocp_config(),
                cfg.train.total_steps, eval_env_factory=eval_env_factory,
                eval_seed=cfg.train.eval_seed, seed=s, log=log)
        except Exception as exc:  # isolate per-seed failures
            click.echo(f"seed {s} failed: {exc}", err=True)
            summary.append([s, float("nan"), float("nan"), 0])
            continue
        rows = [[r["update"], r["env_steps"], r["avg_reward"],
                 r["violation_fraction"], r["savings_fraction"]]
                for r in result.curve]
        _write_csv(out_dir / f"ppo_curve_seed{s}.csv", CURVE_COLUMNS,
                   rows, cfg.hash())
        koopman.save_model(out_dir / f"ppo_best_seed{s}.npz",
                           result.best_model)
        summary.append([s, result.best_reward, result.best_round,
                        result.env_steps])
    _write_csv(out_dir / "train_summary.csv",
               ["seed", "best_eval_reward", "best_round", "env_steps"],
               summary, cfg.hash())
    if any(np.isnan(row[1]) for row in summary):
        raise click.ClickException("one or more seeds failed; see summary")
    click.echo(f"wrote {out_dir}/train_summary.csv")


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--model", "model_path", type=click.Path(exists=True),
              required=True)
@click.option("--mode", type=click.Choice(["koopman-si", "koopman-ppo"]),
              default="koopman-ppo")
@click.option("--out", type=click.Path(), default=None)
def cmd_eval(config_path, model_path, mode, out):
    """Deterministic test episode with metrics and a trajectory export."""
    cfg, out_dir = _load_run(config_path, None, out)
    model = _load_policy_model(model_path)
    ocp_mode = "hard" if mode == "koopman-si" else "slack_penalty"
    policy = EnmpcPolicy(model, cfg.ocp_config(), mode=ocp_mode)
    env = _make_eval_env(cfg, cfg.eval_prices())
    metrics = rlmod.evaluate_policy(policy, env,
                                    reset_seed=cfg.eval.reset_seed)
    rows = metrics.pop("rows")
    ledger = metrics.pop("ledger")
    tag = mode.replace("-", "_")
    write_trajectory(out_dir / f"eval_trajectory_{tag}.csv", rows,
                     cfg.hash())
    names = sorted(metrics)
    _write_csv(out_dir / f"eval_metrics_{tag}.csv", names,
               [[metrics[k] for k in names]], cfg.hash())
    for k in names:
        click.echo(f"{k}={_fmt(metrics[k])}")
    drift = abs(ledger["ns_end"] - ledger["ns_start"]
                - ledger["flow_sum"] - ledger["clip_sum"])
    click.echo(f"storage_ledger_drift={drift:.3e}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="koopmpc", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except Exception as exc:  # noqa: BLE001 — single CLI failure funnel
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
