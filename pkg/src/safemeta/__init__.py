"""Safe meta-reinforcement learning on tabular constrained MDPs."""
from .cmdp import (
    MixturePolicy,
    Policy,
    TabularCmdp,
    ValuePair,
    budget_to_margin,
    cmdp_distance,
    exact_mixture_values,
    exact_policy_values,
    smoothness_constant,
    validate_cmdp,
)
from .planner import oracle_check, oracle_feasible, oracle_optimal, solve_cmdp_lp
from .meta_train import TrainConfig, TrainingBundle, build_cover, estimate_covering_number, train
from .adaptation import TestConfig, TestReport, rollout, run_static, run_test, run_test_pce
from .envs import NoiseDistribution, build_gridworld, make_gridworld_sampler

__version__ = "0.1.0"
