"""
TQL Lab - Core Package

Return distributions, risk measures, environments, exact operators,
quantile-table agents, configuration and experiment orchestration.
"""

from .constants import APP_NAME, AUTHOR, VERSION
from .distributions import ReturnDistribution, dirac, normalize
from .risk import RiskMeasure, evaluate, parse_measure
from .envs import TabularMDP, make_env, three_state_mdp
from .operators import HistoryPolicy, MarkovPolicy, brute_force_optimal, hr_policy_iteration
from .agents import AgentConfig, QuantileAgent, train
from .config_manager import ConfigManager, ExperimentConfig, get_config_manager, parse_config, setup_logging
from .experiment import ExperimentRunner, build_counterexample_report

__all__ = [
    # Version and metadata
    "VERSION",
    "APP_NAME",
    "AUTHOR",
    # Distributions and risk
    "ReturnDistribution",
    "dirac",
    "normalize",
    "RiskMeasure",
    "evaluate",
    "parse_measure",
    # Environments and operators
    "TabularMDP",
    "make_env",
    "three_state_mdp",
    "HistoryPolicy",
    "MarkovPolicy",
    "brute_force_optimal",
    "hr_policy_iteration",
    # Agents
    "AgentConfig",
    "QuantileAgent",
    "train",
    # Harness
    "ConfigManager",
    "ExperimentConfig",
    "get_config_manager",
    "parse_config",
    "setup_logging",
    "ExperimentRunner",
    "build_counterexample_report",
]
