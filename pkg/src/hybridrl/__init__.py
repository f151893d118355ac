"""Hybrid offline/online policy optimisation: evaluation, actor-critic and NPG."""

from .comblock import ComblockConfig, ComblockEnv, generate_offline_dataset, make_env
from .errors import (
    ConfigError,
    EmptyBatch,
    HybridRLError,
    NonFiniteIterate,
    NonFiniteLoss,
    SampleBudgetExceeded,
)
from .funcapprox import LinearClass, MlpClass, conjugate_gradient, solve_hybrid_regression
from .hac import HacConfig, SoftmaxPolicy, run_hac, softmax_update
from .harness import ExperimentConfig, run_experiment
from .hnpg import FhHnpgConfig, HnpgConfig, gae_advantages, run_fh_hnpg, run_hnpg
from .hpe import HpeConfig, fhpe, hpe
from .mdp import TabularEnv, TabularMdp, TabularPolicy, random_mdp, tabular_q_exact

__version__ = "0.1.0"

__all__ = [
    "ComblockConfig", "ComblockEnv", "generate_offline_dataset", "make_env",
    "ConfigError", "EmptyBatch", "HybridRLError", "NonFiniteIterate", "NonFiniteLoss",
    "SampleBudgetExceeded", "LinearClass", "MlpClass", "conjugate_gradient",
    "solve_hybrid_regression", "HacConfig", "SoftmaxPolicy", "run_hac", "softmax_update",
    "ExperimentConfig", "run_experiment", "FhHnpgConfig", "HnpgConfig", "gae_advantages",
    "run_fh_hnpg", "run_hnpg", "HpeConfig", "fhpe", "hpe", "TabularEnv", "TabularMdp",
    "TabularPolicy", "random_mdp", "tabular_q_exact",
]
