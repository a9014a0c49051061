"""
TQL Lab - Constants and Configuration

Numeric tolerances, experiment defaults, message templates and the
expected values the counterexample command checks against.
"""

import os
from pathlib import Path

# Version Information
VERSION = "1.0.0"
APP_NAME = "TQL Lab"
AUTHOR = "TQL Lab Developers"

# Application Paths
APP_ROOT = Path(__file__).parent.parent.parent
CONFIG_DIR = APP_ROOT / "config"
OUTPUT_ROOT_ENV = "TQL_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# Numeric tolerances
ATOM_MERGE_TOL = 1e-9
PROB_SUM_TOL = 1e-12
QUANTILE_TOL = 1e-12
TIE_TOL = 1e-10
BISECTION_TOL = 1e-12
COUNTEREXAMPLE_TOL = 1e-9

# Exact dynamic programming
DEFAULT_MAX_ATOMS = 64
DEFAULT_MAX_NODES = 1_000_000
DEFAULT_MAX_POLICIES = 1_000_000
DEFAULT_MAX_ITERS = 100
DEFAULT_SWEEPS = 50

# Risk measures
DEFAULT_MEASURE = "cvar:0.1"
CPW_MIN_ETA = 0.3
DEFAULT_SAMPLE_SIZE = 128

# Agent defaults (discrete hyperparameter table; learning rate is tabular)
AGENT_DEFAULTS = {
    "n_quantiles": 50,
    "learning_rate": 0.1,
    "gamma": None,
    "epsilon_init": 0.25,
    "epsilon_final": 0.001,
    "epsilon_decay_steps": 50_000,
    "epsilon_test": 0.0,
    "buffer_size": 300_000,
    "batch_size": 32,
    "start_timesteps": 5_000,
    "target_update_frequency": 500,
    "history_window": 10,
    "huber_kappa": 1.0,
    "sample_size": DEFAULT_SAMPLE_SIZE,
    "gradient_steps": 1,
    "stochastic_fractions": False,
    "default_value": 0.0,
}
AGENT_KINDS = ("markov_qr", "tql")

# Training defaults
DEFAULT_TOTAL_STEPS = 200_000
DEFAULT_EVAL_EVERY = 20_000
DEFAULT_EVAL_EPISODES = 1_000

# Environments
ENV_NAMES = ("three_state", "grid", "mountain_car", "random")
GRID_ALPHABET = frozenset("SGYBO.")
DEFAULT_GRID_LAYOUT = """\
S Y . Y
O . B .
. O . .
. . . G
"""
GRID_DEFAULTS = {
    "bonus_prob": 0.75,
    "bonus_value": 100.0,
    "blue_value": 20.0,
    "orange_penalty": -100.0,
    "step_penalty": -2.0,
    "gamma": 1.0,
    "horizon": 8,
    "actions": "right_down",
}
GRID_MOVES = {
    "right_down": (("right", (0, 1)), ("down", (1, 0))),
    "four": (
        ("up", (-1, 0)),
        ("down", (1, 0)),
        ("left", (0, -1)),
        ("right", (0, 1)),
    ),
}

# Continuous Mountain-Car physics
MOUNTAIN_CAR = {
    "min_position": -1.2,
    "max_position": 0.6,
    "max_speed": 0.07,
    "goal_position": 0.45,
    "goal_velocity": 0.0,
    "power": 0.0015,
    "gravity": 0.0025,
    "goal_reward": 100.0,
    "control_cost": 0.1,
    "init_low": -0.6,
    "init_high": -0.4,
}
MOUNTAIN_CAR_DEFAULTS = {
    "c": 0.5,
    "position_bins": 32,
    "velocity_bins": 32,
    "action_values": (-1.0, -0.5, 0.0, 0.5, 1.0),
    "action_repeat": 5,
    "gamma": 0.99,
    "horizon": 200,
}

# Expected values for the counterexample command under CVaR(0.1)
COUNTEREXAMPLE_MEASURE = "cvar:0.1"
EXPECTED_BETA_OPTIMAL = (79.0, -15.0, -10.0, -5.0)
EXPECTED_BETA_BELLMAN = (-15.0, -10.0, -10.0, -5.0)
EXPECTED_TIE_GAP = 99.0

# Output files
LEARNING_CURVE_FILE = "learning_curve.csv"
HISTOGRAM_FILE = "histogram.csv"
POLICY_LOG_FILE = "policy_log.csv"
EXACT_SUMMARY_FILE = "exact_summary.csv"
SWEEP_FILE = "sweep.csv"
CONFIG_SNAPSHOT_FILE = "config.snapshot"
RUN_LOG_FILE = "run.log"
CSV_FLOAT_FORMAT = "%.9g"

# CLI Configuration
CLI_BANNER = f"""
╔══════════════════════════════════════════════════════════════╗
║                        TQL LAB v{VERSION}                        ║
║     Risk-sensitive distributional RL over whole histories    ║
╚══════════════════════════════════════════════════════════════╝
"""

# Logging Configuration
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_LEVEL = os.environ.get("TQL_LOG_LEVEL", "INFO")

# Error Messages
ERROR_MESSAGES = {
    "non_finite": "Value must be finite, got {value!r}.",
    "zero_mass": "Distribution has no positive probability mass.",
    "negative_prob": "Atom probabilities must be non-negative and finite.",
    "weight_sum": "Mixture weights sum to {total!r}, expected 1.",
    "negative_scale": "Affine scale must be non-negative, got {scale!r}.",
    "fraction_range": "Fraction must lie in (0, 1), got {value!r}.",
    "wasserstein_order": "Wasserstein order p must be >= 1, got {p!r}.",
    "key_mismatch": "Distribution maps have different key sets ({detail}).",
    "max_atoms": "max_atoms must be at least 2, got {value!r}.",
    "unknown_measure": "Unknown risk measure {name!r}; expected one of {choices}.",
    "bad_measure_spec": "Malformed measure spec {spec!r}; expected 'kind' or 'kind:eta'.",
    "measure_eta": "Invalid eta {eta!r} for {kind}: {reason}.",
    "tau_range": "Fraction tau must lie in [0, 1].",
    "empty_quantiles": "Quantile list must not be empty.",
    "probability_range": "Probability must lie in (0, 1), got {value!r}.",
    "invalid_mdp": "Invalid MDP: {reason}.",
    "invalid_layout": "Invalid grid layout: {reason}.",
    "penalty_scale": "Risky penalty scale c must lie in [0, 1], got {value!r}.",
    "action_value": "Action values must lie in [-1, 1], got {value!r}.",
    "invalid_action": "Policy returned invalid action {action!r} at history {history!r}.",
    "horizon": "Horizon must be at least 1, got {value!r}.",
    "node_budget": "History tree needs more than {limit} nodes (requested {size}).",
    "policy_budget": "Policy enumeration needs {size} candidates, limit is {limit}.",
    "missing_key": "Distribution map is missing entry {key!r}.",
    "kappa": "Huber kappa must be positive, got {value!r}.",
    "agent_config": "Invalid agent configuration: {reason}.",
    "agent_kind": "Unknown agent kind {kind!r}; expected one of {choices}.",
    "unknown_env": "Unknown environment {name!r}; expected one of {choices}.",
    "config_error": "Configuration error:\n{details}",
    "config_file": "Cannot read configuration file {path}: {reason}",
    "no_config_loaded": "No configuration file has been loaded.",
    "no_seeds": "At least one seed is required for a sweep.",
}

# Success Messages
SUCCESS_MESSAGES = {
    "counterexample": "All counterexample entries match the expected values.",
    "exact": "Exact summary written to {path}",
    "train": "Training run {run_id} finished; outputs in {path}",
    "sweep": "Sweep over {n} seed(s) written to {path}",
    "config_exported": "Configuration snapshot written to {path}",
}
