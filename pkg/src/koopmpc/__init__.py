"""Koopman surrogate modelling and economic MPC with policy-gradient
refinement, at desk scale.

The pipeline: sample plant data, fit a linear-latent (Koopman) surrogate,
wrap it in a convex optimal control problem solved online as the control
policy, then fine-tune the surrogate's parameters with PPO by
differentiating through the optimizer's KKT conditions.
"""

from .autodiff import Tape, Var
from .config import RunConfig, load_config
from .env import DemandResponseEnv, RewardConfig
from .koopman import KoopmanModel, ModelDims, init_model, upscale
from .ocp import OcpConfig, build_ocp, first_input, solve_ocp
from .plant import LinearLatentPlant, PlantModel, SurrogatePlant, default_scaler
from .policy import EnmpcPolicy
from .prices import PriceSeries, gen_prices, load_prices, save_prices
from .qp import QpProblem, QpSolution, solve_qp, solution_data_vjp
from .rl import Critic, PpoConfig, PpoTrainer, gae, train
from .scaling import BoxScaler, PlantScaler
from .sysid import FitConfig, KoopmanSysId, SiConfig, fit_koopman, iterative_si

__version__ = "0.1.0"

__all__ = [
    "BoxScaler", "Critic", "DemandResponseEnv", "EnmpcPolicy", "FitConfig",
    "KoopmanModel", "KoopmanSysId", "LinearLatentPlant", "ModelDims",
    "OcpConfig", "PlantModel", "PlantScaler", "PpoConfig", "PpoTrainer",
    "PriceSeries", "QpProblem", "QpSolution", "RewardConfig", "RunConfig",
    "SiConfig", "SurrogatePlant", "Tape", "Var", "build_ocp",
    "default_scaler", "first_input", "fit_koopman", "gae", "gen_prices",
    "init_model", "iterative_si", "load_config", "load_prices",
    "save_prices", "solve_ocp", "solve_qp", "solution_data_vjp", "train",
    "upscale",
]
