"""Shared fixtures for the TQL Lab test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from core.distributions import ReturnDistribution  # noqa: E402
from core.envs import random_mdp, three_state_mdp, tie_counterexample_mdp  # noqa: E402
from core.risk import RiskMeasure  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def three_state():
    return three_state_mdp()


@pytest.fixture
def tie_mdp():
    return tie_counterexample_mdp()


@pytest.fixture
def cvar01():
    return RiskMeasure.cvar(0.1)


@pytest.fixture
def coin():
    """The risky reward of the three-state MDP."""
    return ReturnDistribution([-10.0, 100.0], [0.1, 0.9])


@pytest.fixture
def make_distribution():
    """Factory for random Dirac mixtures."""

    def make(rng, max_atoms=3, low=-10.0, high=10.0):
        k = int(rng.integers(1, max_atoms + 1))
        return ReturnDistribution(rng.uniform(low, high, size=k), rng.dirichlet(np.ones(k)))

    return make


@pytest.fixture
def make_random_mdps():
    """Factory for reproducible batches of small random MDPs."""

    def make(seed, count, **params):
        rng = np.random.default_rng(seed)
        instances = []
        for _ in range(count):
            kwargs = {
                "n_states": int(rng.integers(3, 6)),
                "n_actions": 2,
                "horizon": int(rng.integers(2, 5)),
            }
            kwargs.update(params)
            instances.append(random_mdp(rng, **kwargs))
        return instances

    return make
