"""Run configuration: one YAML file covering every stage of the pipeline.

Loading is strict — unknown keys anywhere in the tree are rejected with
their dotted path — and every value lands in the corresponding module
config dataclass so module invariants are validated at load time. A short
hash of the fully resolved configuration stamps all output files.
"""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import numpy as np
import yaml

from .env import RewardConfig
from .koopman import ModelDims
from .ocp import OcpConfig
from .plant import SurrogatePlant, default_scaler
from .prices import PriceSeries, gen_prices, load_prices, synthetic_reference
from .rl import PpoConfig
from .sysid import FitConfig, SiConfig


@dataclass
class DimsSection:
    n_z: int = 10


@dataclass
class PlantSection:
    substep_minutes: float = 1.0


@dataclass
class SyntheticSection:
    hours: int = 24 * 28
    seed: int = 10
    mean: float = 50.0
    std: float = 12.0


@dataclass
class PricesSection:
    file: typing.Optional[str] = None
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    eval_hours: int = 120
    eval_seed: int = 99


@dataclass
class OcpSection:
    horizon: int = 6
    dt_minutes: float = 15.0
    m_penalty: float = 1e4
    delta: float = 0.2
    demand_rate: float = 1.0
    solver_tol: float = 1e-8
    solver_max_iter: int = 60


@dataclass
class TrainSection:
    total_steps: int = 50000
    seeds: tuple = (1, 2, 3, 4, 5)
    episode_steps: int = 96
    eval_seed: int = 0


@dataclass
class EvalSection:
    episode_steps: int = 288
    reset_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dims: DimsSection = field(default_factory=DimsSection)
    plant: PlantSection = field(default_factory=PlantSection)
    prices: PricesSection = field(default_factory=PricesSection)
    ocp: OcpSection = field(default_factory=OcpSection)
    reward: RewardConfig = field(default_factory=RewardConfig)
    si: SiConfig = field(default_factory=SiConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- constructed objects ------------------------------------------------
    def scaler(self):
        return default_scaler()

    def model_dims(self) -> ModelDims:
        sc = self.scaler()
        return ModelDims(sc.x_obs.n, self.dims.n_z, sc.u.n, sc.n_pred,
                         sc.y.n)

    def make_plant(self) -> SurrogatePlant:
        return SurrogatePlant(self.plant.substep_minutes)

    def ocp_config(self) -> OcpConfig:
        o = self.ocp
        return OcpConfig(scaler=self.scaler(), horizon=o.horizon,
                         dt_minutes=o.dt_minutes, m_penalty=o.m_penalty,
                         delta=o.delta, demand_rate=o.demand_rate,
                         solver_tol=o.solver_tol,
                         solver_max_iter=o.solver_max_iter)

    def reference_prices(self) -> PriceSeries:
        p = self.prices
        if p.file:
            return load_prices(p.file)
        s = p.synthetic
        return synthetic_reference(s.hours, s.seed, s.mean, s.std)

    def eval_prices(self) -> PriceSeries:
        """Held-out series, generated fresh so it never overlaps training."""
        p = self.prices
        return gen_prices(self.reference_prices(), p.eval_hours,
                          p.eval_seed)

    # -- (de)serialization --------------------------------------------------
    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: convert(getattr(obj, f.name))
                        for f in dataclasses.fields(obj)}
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, (np.integer, np.floating)):
                return obj.item()
            if isinstance(obj, (list, tuple)):
                return [convert(v) for v in obj]
            return obj
        return convert(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _coerce(cls, value, path):
    """Build a dataclass instance from a nested plain-dict, strictly."""
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ValueError(f"config key '{path}' must be a mapping, "
                         f"got {type(value).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - names)
    if unknown:
        where = path or "top level"
        raise ValueError(f"unknown config key(s) {unknown} at {where}")
    defaults = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in value:
            continue
        v = value[f.name]
        sub = f"{path}.{f.name}" if path else f.name
        ftype = hints.get(f.name)
        if dataclasses.is_dataclass(ftype):
            kwargs[f.name] = _coerce(ftype, v, sub)
        elif isinstance(getattr(defaults, f.name), tuple) \
                and isinstance(v, list):
            kwargs[f.name] = tuple(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    cfg = _coerce(RunConfig, d, "")
    # sections that only mirror a module config are validated by building
    # the real object once
    cfg.ocp_config()
    cfg.model_dims()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    try:
        return config_from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"{path}: {exc}") from None
