"""
TQL Lab - Exceptions

All engine errors derive from TQLLabError. Input-validation failures are
also ValueErrors so callers can catch them the usual way.
"""

from typing import List, Sequence

from .constants import ERROR_MESSAGES


def format_error(key: str, /, **fields) -> str:
    """Render one of the ERROR_MESSAGES templates."""
    return ERROR_MESSAGES[key].format(**fields)


class TQLLabError(Exception):
    """Base class for every error raised by the engine."""


class DistributionError(TQLLabError, ValueError):
    """Invalid return distribution or distribution operation."""


class RiskMeasureError(TQLLabError, ValueError):
    """Invalid risk measure specification or parameter."""


class MDPError(TQLLabError, ValueError):
    """Invalid environment definition."""


class PolicyError(TQLLabError, ValueError):
    """A policy produced an action outside the action set."""


class AgentError(TQLLabError, ValueError):
    """Invalid agent configuration or loss parameter."""


class BudgetExceededError(TQLLabError, RuntimeError):
    """An exact enumeration would exceed its configured size budget."""

    def __init__(self, message: str, size: int, limit: int):
        super().__init__(message)
        self.size = size
        self.limit = limit


class ConfigError(TQLLabError, ValueError):
    """Configuration text failed to parse or validate.

    Carries every problem found, not just the first.
    """

    def __init__(self, problems: Sequence[str]):
        self.problems: List[str] = list(problems)
        details = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(format_error("config_error", details=details))
