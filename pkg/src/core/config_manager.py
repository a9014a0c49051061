"""
TQL Lab - Configuration Manager

Experiment files are flat `key = value` text with dotted keys and `#`
comments. parse_config validates every line and reports all problems at
once; ConfigManager wraps a loaded file with dot-notation access, export and
validation.
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from .agents import AgentConfig
from .constants import (
    AGENT_DEFAULTS,
    AGENT_KINDS,
    DEFAULT_EVAL_EPISODES,
    DEFAULT_EVAL_EVERY,
    DEFAULT_MAX_ITERS,
    DEFAULT_MAX_NODES,
    DEFAULT_MAX_POLICIES,
    DEFAULT_MEASURE,
    DEFAULT_OUTPUT_ROOT,
    DEFAULT_SWEEPS,
    DEFAULT_TOTAL_STEPS,
    ENV_NAMES,
    GRID_DEFAULTS,
    GRID_MOVES,
    LOG_DATE_FORMAT,
    LOG_FORMAT,
    LOG_LEVEL,
    MOUNTAIN_CAR_DEFAULTS,
    OUTPUT_ROOT_ENV,
)
from .envs import TabularMDP, make_env
from .errors import AgentError, ConfigError, TQLLabError, format_error
from .risk import RiskMeasure, parse_measure

_REQUIRED = object()


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.lower() in ("none", "null", "") else parser(text)

    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


def _float_list(text: str) -> Tuple[float, ...]:
    items = [item.strip() for item in text.split(",") if item.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(item) for item in items)


def _measure(text: str) -> str:
    return str(parse_measure(text))


def _agent_parser(name: str) -> Callable[[str], Any]:
    if name == "gamma":
        return _optional(float)
    if name == "history_window":
        return _optional(int)
    if name == "stochastic_fractions":
        return _parse_bool
    default = AGENT_DEFAULTS[name]
    return int if isinstance(default, int) and not isinstance(default, bool) else float


# key -> (parser, default)
CONFIG_SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "seed": (int, _REQUIRED),
    "measure": (_measure, DEFAULT_MEASURE),
    "output_dir": (str, None),
    "env.name": (_choice(*ENV_NAMES), "three_state"),
    "env.gamma": (_optional(float), None),
    "env.horizon": (_optional(int), None),
    "env.grid.layout_file": (_optional(str), None),
    "env.grid.actions": (_choice(*GRID_MOVES), GRID_DEFAULTS["actions"]),
    "env.grid.bonus_prob": (float, GRID_DEFAULTS["bonus_prob"]),
    "env.grid.bonus_value": (float, GRID_DEFAULTS["bonus_value"]),
    "env.grid.blue_value": (float, GRID_DEFAULTS["blue_value"]),
    "env.grid.orange_penalty": (float, GRID_DEFAULTS["orange_penalty"]),
    "env.grid.step_penalty": (float, GRID_DEFAULTS["step_penalty"]),
    "env.mountain_car.c": (float, MOUNTAIN_CAR_DEFAULTS["c"]),
    "env.mountain_car.position_bins": (int, MOUNTAIN_CAR_DEFAULTS["position_bins"]),
    "env.mountain_car.velocity_bins": (int, MOUNTAIN_CAR_DEFAULTS["velocity_bins"]),
    "env.mountain_car.action_values": (_float_list, MOUNTAIN_CAR_DEFAULTS["action_values"]),
    "env.mountain_car.action_repeat": (int, MOUNTAIN_CAR_DEFAULTS["action_repeat"]),
    "env.random.seed": (int, 0),
    "env.random.n_states": (int, 5),
    "env.random.n_actions": (int, 2),
    "env.random.max_reward_atoms": (int, 3),
    "env.random.n_initial": (int, 1),
    "agent.kind": (_choice(*AGENT_KINDS), "tql"),
    **{f"agent.{name}": (_agent_parser(name), default) for name, default in AGENT_DEFAULTS.items()},
    "train.total_steps": (int, DEFAULT_TOTAL_STEPS),
    "train.eval_every": (int, DEFAULT_EVAL_EVERY),
    "train.eval_episodes": (int, DEFAULT_EVAL_EPISODES),
    "exact.max_nodes": (int, DEFAULT_MAX_NODES),
    "exact.max_policies": (int, DEFAULT_MAX_POLICIES),
    "exact.max_atoms": (_optional(int), None),
    "exact.max_iters": (int, DEFAULT_MAX_ITERS),
    "exact.sweeps": (int, DEFAULT_SWEEPS),
    "exact.tie_rule": (_choice("lowest_index", "alternating"), "lowest_index"),
}

_POSITIVE = (
    "train.total_steps",
    "train.eval_every",
    "train.eval_episodes",
    "exact.max_nodes",
    "exact.max_policies",
    "exact.max_iters",
    "exact.sweeps",
)


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully defaulted experiment settings."""

    values: Mapping[str, Any]
    base_dir: Optional[Path] = field(default=None, compare=False)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def measure(self) -> RiskMeasure:
        return parse_measure(self.values["measure"])

    @property
    def env_name(self) -> str:
        return self.values["env.name"]

    @property
    def agent_kind(self) -> str:
        return self.values["agent.kind"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    @property
    def agent_config(self) -> AgentConfig:
        return AgentConfig.from_dict(
            {name: self.values[f"agent.{name}"] for name in AGENT_DEFAULTS}
        )

    def env_params(self) -> Dict[str, Any]:
        """Keyword arguments for make_env."""
        prefix = f"env.{self.env_name}."
        params = {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}
        layout = params.get("layout_file")
        if layout and self.base_dir is not None and not Path(layout).is_absolute():
            candidate = self.base_dir / layout
            if candidate.exists() or not Path(layout).exists():
                params["layout_file"] = str(candidate)
        if layout is None:
            params.pop("layout_file", None)
        return params

    def build_env(self) -> TabularMDP:
        return make_env(
            self.env_name,
            gamma=self.values["env.gamma"],
            horizon=self.values["env.horizon"],
            **self.env_params(),
        )

    def to_text(self, include_output: bool = True) -> str:
        """Canonical `key = value` listing, one line per effective value."""
        keys = sorted(k for k in self.values if include_output or k != "output_dir")
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in keys)

    @property
    def config_hash(self) -> str:
        digest = hashlib.sha256(self.to_text(include_output=False).encode("utf-8"))
        return digest.hexdigest()[:12]

    def with_values(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted keys overridden (underscores in place of dots)."""
        values = dict(self.values)
        for name, value in overrides.items():
            key = name.replace("__", ".")
            if key not in CONFIG_SCHEMA:
                raise ConfigError([f"{key}: unknown key"])
            values[key] = value
        return ExperimentConfig(values, self.base_dir)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.with_values(seed=int(seed))


def parse_config(text: str, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """
    Parse and validate configuration text.

    Args:
        text: `key = value` lines; blank lines and `#` comments are ignored
        base_dir: Directory that relative file paths are resolved against

    Returns:
        ExperimentConfig with every schema key present

    Raises:
        ConfigError: listing every problem found
    """
    problems: List[str] = []
    seen: Dict[str, int] = {}
    parsed: Dict[str, Any] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            problems.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        if key not in CONFIG_SCHEMA:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in seen:
            problems.append(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
            continue
        seen[key] = lineno
        parser, _ = CONFIG_SCHEMA[key]
        try:
            parsed[key] = parser(value)
        except (ValueError, TQLLabError) as e:
            problems.append(f"line {lineno}: {key}: {e}")

    values: Dict[str, Any] = {}
    for key, (_, default) in CONFIG_SCHEMA.items():
        if key in parsed:
            values[key] = parsed[key]
        elif key in seen:
            continue
        elif default is _REQUIRED:
            problems.append(f"{key}: required")
        else:
            values[key] = default
    if values.get("output_dir") is None:
        values["output_dir"] = os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT

    for key in _POSITIVE:
        if key in values and values[key] < 1:
            problems.append(f"line {seen.get(key, '-')}: {key}: must be >= 1")
    if values.get("env.horizon") is not None and values["env.horizon"] < 1:
        problems.append(f"line {seen['env.horizon']}: env.horizon: must be >= 1")
    if values.get("exact.max_atoms") is not None and values["exact.max_atoms"] < 2:
        problems.append(f"line {seen['exact.max_atoms']}: exact.max_atoms: must be >= 2")
    agent_keys = [f"agent.{name}" for name in AGENT_DEFAULTS]
    if all(k in values for k in agent_keys):
        try:
            AgentConfig.from_dict({k[len("agent."):]: values[k] for k in agent_keys})
        except AgentError as e:
            problems.append(str(e))

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(values, base_dir)


def setup_logging(log_file: Optional[Path] = None, level: str = LOG_LEVEL):
    """Route log records to stderr and, when given, to a run log file."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        handlers=handlers,
        force=True,
    )


class ConfigManager:
    """Loads one experiment file and exposes its effective values."""

    def __init__(self, config_path):
        """
        Load and validate a configuration file.

        Args:
            config_path: Path to the `.conf` file

        Raises:
            ConfigError: if the file cannot be read or fails validation
        """
        self.config_path = Path(config_path)
        self.logger = logging.getLogger(__name__)
        try:
            text = self.config_path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError([format_error("config_file", path=self.config_path, reason=e.strerror)])
        self.config = parse_config(text, base_dir=self.config_path.parent)
        self.logger.info(f"Configuration loaded from {self.config_path} ({self.config.config_hash})")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get an effective configuration value.

        Args:
            key: Dotted key, e.g. "agent.batch_size"
            default: Returned when the key is unknown

        Returns:
            Configuration value or default
        """
        return self.config.get(key, default)

    def export_config(self, export_path) -> bool:
        """
        Write the canonical snapshot of the effective configuration.

        Returns:
            bool: True if successful
        """
        try:
            path = Path(export_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.config.to_text(), encoding="utf-8")
            self.logger.info(f"Configuration exported to {path}")
            return True
        except OSError as e:
            self.logger.error(f"Failed to export config: {e}")
            return False

    def validate_config(self) -> bool:
        """
        Check that the configured environment can actually be built.

        Returns:
            bool: True if configuration is valid
        """
        try:
            mdp = self.config.build_env()
        except (TQLLabError, OSError) as e:
            self.logger.error(f"Invalid environment settings: {e}")
            return False
        self.logger.debug(f"Environment OK: {mdp!r}")
        return True

    def __repr__(self) -> str:
        return f"ConfigManager(config_path='{self.config_path}')"


# Singleton instance
_config_manager_instance: Optional[ConfigManager] = None


def get_config_manager(config_path=None) -> ConfigManager:
    """
    Get the process-wide ConfigManager.

    Args:
        config_path: Load this file and make it the current configuration

    Raises:
        ConfigError: if no path is given and nothing has been loaded yet
    """
    global _config_manager_instance
    if config_path is not None:
        _config_manager_instance = ConfigManager(config_path)
    elif _config_manager_instance is None:
        raise ConfigError([format_error("no_config_loaded")])
    return _config_manager_instance
