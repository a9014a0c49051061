"""Tests for quantile tables, the quantile Huber loss and the learning agents."""

import numpy as np
import pytest

from core.distributions import ReturnDistribution, quantile
from core.errors import AgentError
from core.agents import (
    AgentConfig,
    QuantileAgent,
    QuantileTable,
    ReplayBuffer,
    Transition,
    evaluate_policy,
    qr_target_history,
    qr_target_markov,
    qr_update,
    quantile_huber,
    quantile_huber_grad,
    train,
)
from core.envs import risky_grid
from core.operators import MarkovPolicy, greedy_path, hr_policy_iteration, trajectory_return_dist
from core.risk import RiskMeasure, evaluate


def _transition(**overrides):
    values = dict(
        history_key=(0,),
        prefix_return=1.0,
        prefix_steps=0,
        depth=0,
        state=0,
        action=0,
        reward=1.0,
        next_state=1,
        next_history_key=(0, 0, 1),
        done=False,
    )
    values.update(overrides)
    return Transition(**values)


class TestQuantileHuber:
    """Test cases for the quantile Huber loss and its gradient."""

    def test_known_values(self):
        """Zero at zero; 0.75 at u=2, tau=0.5, kappa=1."""
        assert quantile_huber(0.0, 0.3, 1.0) == 0.0
        assert quantile_huber(2.0, 0.5, 1.0) == pytest.approx(0.75)

    def test_asymmetry(self):
        """Inside the quadratic zone the tau weights give a 9:1 ratio at tau=0.9."""
        ratio = quantile_huber(0.1, 0.9, 1.0) / quantile_huber(-0.1, 0.9, 1.0)
        assert ratio == pytest.approx(9.0)

    def test_non_negative(self, rng):
        """The loss is never negative."""
        u = rng.uniform(-5, 5, 1000)
        tau = rng.uniform(0, 1, 1000)
        assert np.all(quantile_huber(u, tau, 0.7) >= 0)

    def test_gradient_matches_finite_differences(self, rng):
        """Analytic gradient agrees with central differences away from kinks."""
        kappa = 1.0
        u = rng.uniform(-3, 3, 1000)
        tau = rng.uniform(0, 1, 1000)
        mask = (np.abs(u) > 1e-3) & (np.abs(np.abs(u) - kappa) > 1e-3)
        u, tau = u[mask], tau[mask]
        h = 1e-6
        numeric = (quantile_huber(u + h, tau, kappa) - quantile_huber(u - h, tau, kappa)) / (2 * h)
        assert np.allclose(quantile_huber_grad(u, tau, kappa), numeric, atol=1e-6)

    @pytest.mark.parametrize("kappa", [0.0, -1.0])
    def test_kappa_must_be_positive(self, kappa):
        """Non-positive kappa is rejected."""
        with pytest.raises(AgentError):
            quantile_huber(1.0, 0.5, kappa)
        with pytest.raises(AgentError):
            quantile_huber_grad(1.0, 0.5, kappa)


class TestQRUpdate:
    """Test cases for quantile-regression steps on a table entry."""

    def test_converges_to_quantiles(self):
        """Repeated steps settle near the tau-midpoint quantiles of the targets."""
        table = QuantileTable(n_actions=1, n_quantiles=4)
        targets = np.array([-1.0] * 3 + [1.0] * 5 + [2.0] * 2)
        for _ in range(5000):
            qr_update(table, "s", 0, targets, learning_rate=1.0, kappa=0.02)
        expected = quantile(ReturnDistribution(targets), table.taus)
        assert np.allclose(table.get("s", 0), expected, atol=0.05)

    def test_fixed_point(self):
        """Targets equal to the entry leave it unchanged."""
        table = QuantileTable(1, 5)
        table.set("s", 0, [3.0] * 5)
        qr_update(table, "s", 0, [3.0] * 5, learning_rate=0.5, kappa=1.0)
        assert table.get("s", 0).tolist() == [3.0] * 5

    def test_large_kappa_single_quantile_regresses_to_mean(self):
        """N=1 with a huge kappa is mean regression."""
        table = QuantileTable(1, 1)
        for _ in range(200):
            qr_update(table, 0, 0, [-1.0, 1.0, 1.0, 2.0], learning_rate=0.5, kappa=1e6)
        assert table.get(0, 0)[0] == pytest.approx(0.75, abs=1e-6)

    def test_entries_stay_sorted(self, rng):
        """Every update leaves a sorted entry."""
        table = QuantileTable(1, 8)
        for _ in range(50):
            entry = qr_update(table, 0, 0, rng.normal(size=7), learning_rate=0.9, kappa=0.5)
            assert np.all(np.diff(entry) >= 0)


class TestQuantileTable:
    """Test cases for QuantileTable storage."""

    def test_default_entry(self):
        """Missing entries read as the default value and are not stored."""
        table = QuantileTable(2, 3, default_value=1.5)
        assert table.get((0,), 1).tolist() == [1.5, 1.5, 1.5]
        assert len(table) == 0
        with pytest.raises(ValueError):
            table.get((0,), 1)[0] = 2.0

    def test_taus(self):
        """Midpoint fractions."""
        assert QuantileTable(1, 4).taus.tolist() == [0.125, 0.375, 0.625, 0.875]

    def test_set_sorts_and_checks_length(self):
        """Entries are stored sorted with exactly N values."""
        table = QuantileTable(1, 3)
        table.set(0, 0, [3.0, 1.0, 2.0])
        assert table.get(0, 0).tolist() == [1.0, 2.0, 3.0]
        with pytest.raises(AgentError):
            table.set(0, 0, [1.0])

    def test_copy_is_independent(self):
        """Writing the original leaves the copy alone."""
        table = QuantileTable(1, 2)
        table.set(0, 0, [0.0, 1.0])
        clone = table.copy()
        table.set(0, 0, [5.0, 6.0])
        assert clone.get(0, 0).tolist() == [0.0, 1.0]

    def test_save_and_load(self, tmp_path):
        """Tables survive a write and read back with tuple and int keys."""
        table = QuantileTable(2, 3, default_value=-1.0)
        table.set((0, 1, 2), 1, [0.1, 0.2, 1.0 / 3.0])
        table.set(4, 0, [-5.0, 0.0, 5.0])
        loaded = QuantileTable.load(table.save(tmp_path / "table.txt"))
        assert loaded == table
        assert loaded.default_value == -1.0

    def test_scores(self):
        """Scores rank actions by the sampled risk."""
        table = QuantileTable(2, 10)
        table.set("s", 1, np.linspace(1.0, 2.0, 10))
        scores = table.scores("s", RiskMeasure.cvar(0.1), 128)
        assert scores[0] == 0.0
        assert scores[1] == pytest.approx(1.0)


class TestReplayBuffer:
    """Test cases for the replay ring."""

    def test_fifo_eviction(self):
        """The oldest transitions are overwritten first."""
        buffer = ReplayBuffer(3)
        for i in range(5):
            buffer.add(_transition(state=i))
        assert len(buffer) == 3
        assert sorted(tr.state for tr in buffer) == [2, 3, 4]

    def test_sample(self, rng):
        """Samples come from stored transitions."""
        buffer = ReplayBuffer(10)
        buffer.add(_transition(state=7))
        assert [tr.state for tr in buffer.sample(4, rng)] == [7] * 4

    def test_empty(self, rng):
        """An empty buffer cannot be sampled."""
        with pytest.raises(AgentError):
            ReplayBuffer(2).sample(1, rng)


class TestTargets:
    """Test cases for the Markov and history targets."""

    @pytest.fixture
    def tables(self):
        online = QuantileTable(2, 4)
        target = QuantileTable(2, 4)
        online.set(1, 1, [5.0] * 4)
        target.set(1, 0, [1.0, 2.0, 3.0, 4.0])
        target.set(1, 1, [10.0, 20.0, 30.0, 40.0])
        return online, target

    def test_markov_done(self, tables):
        """Terminal transitions target the reward."""
        online, target = tables
        out = qr_target_markov([_transition(done=True, reward=2.5)], online, target, RiskMeasure.mean(), 1.0, 32)
        assert out[0].tolist() == [2.5] * 4

    def test_markov_bootstrap(self, tables):
        """Bootstrap uses the target table at the online-greedy action."""
        online, target = tables
        out = qr_target_markov([_transition(reward=1.0)], online, target, RiskMeasure.mean(), 0.5, 32)
        assert out[0].tolist() == [6.0, 11.0, 16.0, 21.0]

    def test_history_done(self, tables):
        """Terminal transitions target the realized prefix return."""
        online, target = tables
        history = QuantileTable(2, 4)
        out = qr_target_history(
            [_transition(done=True, prefix_return=-3.0)], history, target, RiskMeasure.mean(), 1.0, 32
        )
        assert out[0].tolist() == [-3.0] * 4

    def test_history_discounts_by_window_length(self, tables):
        """The bootstrap is discounted by gamma^(prefix_steps + 1)."""
        _, target = tables
        history = QuantileTable(2, 4)
        history.set((0, 0, 1), 1, [9.0] * 4)
        tr = _transition(prefix_return=2.0, prefix_steps=2)
        out = qr_target_history([tr], history, target, RiskMeasure.mean(), 0.5, 32)
        assert out[0].tolist() == pytest.approx([2.0 + 0.125 * v for v in (10.0, 20.0, 30.0, 40.0)])

    def test_zero_window_matches_markov(self, tables):
        """With an empty prefix and agreeing greedy actions both targets coincide."""
        online, target = tables
        history = QuantileTable(2, 4)
        history.set((0, 0, 1), 1, [5.0] * 4)
        tr = _transition(reward=1.5, prefix_return=1.5, prefix_steps=0)
        markov = qr_target_markov([tr], online, target, RiskMeasure.mean(), 0.9, 32)
        hist = qr_target_history([tr], history, target, RiskMeasure.mean(), 0.9, 32)
        assert np.allclose(markov[0], hist[0])


class TestAgentConfig:
    """Test cases for agent hyperparameters."""

    def test_defaults(self):
        """Defaults follow the documented table."""
        cfg = AgentConfig()
        assert cfg.n_quantiles == 50
        assert cfg.learning_rate == 0.1
        assert cfg.history_window == 10

    @pytest.mark.parametrize(
        "overrides",
        [
            {"epsilon_final": 0.5, "epsilon_init": 0.1},
            {"n_quantiles": 0},
            {"learning_rate": 0.0},
            {"huber_kappa": -1.0},
            {"history_window": -1},
            {"gamma": 1.5},
        ],
    )
    def test_invalid(self, overrides):
        """Out-of-range hyperparameters raise."""
        with pytest.raises(AgentError):
            AgentConfig(**overrides)

    def test_unknown_field(self):
        """from_dict rejects unknown names."""
        with pytest.raises(AgentError):
            AgentConfig.from_dict({"momentum": 0.9})

    def test_epsilon_schedule(self):
        """Linear decay, flat afterwards."""
        cfg = AgentConfig(epsilon_init=0.5, epsilon_final=0.1, epsilon_decay_steps=100)
        assert cfg.epsilon(0) == pytest.approx(0.5)
        assert cfg.epsilon(50) == pytest.approx(0.3)
        assert cfg.epsilon(100) == pytest.approx(0.1)
        assert cfg.epsilon(10_000) == pytest.approx(0.1)


class TestQuantileAgent:
    """Test cases for QuantileAgent bookkeeping and action selection."""

    @pytest.mark.parametrize("window,expected", [(None, (0, 1, 2, 3, 4)), (1, (2, 3, 4)), (0, (4,))])
    def test_history_key(self, three_state, cvar01, window, expected):
        """Keys keep the last window (state, action) pairs plus the current state."""
        agent = QuantileAgent("tql", three_state, cvar01, AgentConfig(history_window=window))
        assert agent.history_key((0, 1, 2, 3, 4)) == expected

    def test_window_start(self, three_state, cvar01):
        """Window starts never go below zero."""
        agent = QuantileAgent("tql", three_state, cvar01, AgentConfig(history_window=2))
        assert agent.window_start(1) == 0
        assert agent.window_start(5) == 3

    def test_unknown_kind(self, three_state, cvar01):
        """Only markov_qr and tql exist."""
        with pytest.raises(AgentError):
            QuantileAgent("dqn", three_state, cvar01)

    def test_markov_agent_has_no_history_table(self, three_state, cvar01):
        """The baseline keeps only the state critic."""
        assert QuantileAgent("markov_qr", three_state, cvar01).history is None

    def test_exploration(self, three_state, cvar01, rng):
        """epsilon = 1 is uniform over actions."""
        agent = QuantileAgent("markov_qr", three_state, cvar01)
        actions = [agent.act((0,), 1.0, rng) for _ in range(2000)]
        assert np.mean(actions) == pytest.approx(0.5, abs=0.05)

    def test_greedy(self, three_state, cvar01, rng):
        """epsilon = 0 follows the critic."""
        agent = QuantileAgent("markov_qr", three_state, cvar01, AgentConfig(n_quantiles=4))
        agent.markov.set(0, 1, [1.0] * 4)
        assert all(agent.act((0,), 0.0, rng) == 1 for _ in range(20))

    def test_save(self, three_state, cvar01, tmp_path):
        """TQL writes both tables."""
        agent = QuantileAgent("tql", three_state, cvar01, AgentConfig(n_quantiles=2))
        written = agent.save(tmp_path)
        assert [p.name for p in written] == ["markov_table.txt", "history_table.txt"]


class TestTraining:
    """Test cases for the training loop on the three-state MDP."""

    CONFIG = AgentConfig(
        learning_rate=0.5,
        batch_size=16,
        start_timesteps=500,
        epsilon_decay_steps=3000,
        target_update_frequency=200,
        history_window=None,
    )

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_tql_finds_history_optimum(self, three_state, cvar01, seed):
        """TQL plays the coin twice; its greedy policy scores 79 exactly and empirically."""
        log = train(
            "tql", three_state, cvar01, self.CONFIG, np.random.default_rng(seed),
            total_steps=6000, eval_every=3000, eval_episodes=1000,
        )
        assert [row.step for row in log.rows] == [3000, 6000]
        policy = log.agent.greedy_policy()
        assert greedy_path(three_state, policy) == (0, 0)
        assert evaluate(cvar01, trajectory_return_dist(three_state, policy)) == pytest.approx(79.0)
        # the empirical CVaR(0.1) has a standard error near 0.35 at this size
        measure, _, _ = evaluate_policy(three_state, policy, cvar01, 100_000, np.random.default_rng(100 + seed))
        assert measure == pytest.approx(79.0, abs=1.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_markov_settles_for_sure_rewards(self, three_state, cvar01, seed):
        """The Markov baseline plays a1 twice for -10."""
        log = train(
            "markov_qr", three_state, cvar01, self.CONFIG, np.random.default_rng(seed),
            total_steps=6000, eval_every=6000, eval_episodes=10_000,
        )
        policy = log.agent.greedy_policy()
        assert greedy_path(three_state, policy) == (1, 1)
        assert log.final.measure_value == pytest.approx(-10.0)

    def test_reproducible(self, three_state, cvar01):
        """Equal seeds give identical tables and curves."""
        config = AgentConfig(start_timesteps=50, history_window=1)
        runs = [
            train("tql", three_state, cvar01, config, np.random.default_rng(3),
                  total_steps=300, eval_every=100, eval_episodes=10)
            for _ in range(2)
        ]
        assert runs[0].rows == runs[1].rows
        assert runs[0].agent.markov == runs[1].agent.markov
        assert runs[0].agent.history == runs[1].agent.history

    def test_callback_and_last_step(self, three_state, cvar01):
        """The last step is evaluated even off the schedule."""
        seen = []
        train("markov_qr", three_state, cvar01, AgentConfig(start_timesteps=10), np.random.default_rng(1),
              total_steps=25, eval_every=10, eval_episodes=5, callback=seen.append)
        assert [row.step for row in seen] == [10, 20, 25]

    def test_bad_counts(self, three_state, cvar01):
        """Zero steps are rejected."""
        with pytest.raises(AgentError):
            train("tql", three_state, cvar01, total_steps=0)

    def test_evaluate_policy(self, three_state, cvar01, rng):
        """A sure policy evaluates exactly."""
        measure, mean, returns = evaluate_policy(three_state, MarkovPolicy((1, 1, 0)), cvar01, 20, rng)
        assert measure == mean == -10.0
        assert returns.shape == (20,)


@pytest.mark.slow
class TestGridLearning:
    """Learning on the default mini-grid under CVaR(0.1)."""

    def test_tql_beats_markov_baseline(self, cvar01):
        """TQL's greedy policy beats markov_qr and lands on the history optimum in 4 of 5 seeds."""
        grid = risky_grid()
        optimum = hr_policy_iteration(grid, cvar01).root_beta
        wins = matches = 0
        for seed in range(5):
            scores = {}
            for kind in ("tql", "markov_qr"):
                log = train(
                    kind, grid, cvar01, AgentConfig(), np.random.default_rng(seed),
                    total_steps=200_000, eval_every=200_000, eval_episodes=100,
                )
                scores[kind] = evaluate(cvar01, trajectory_return_dist(grid, log.agent.greedy_policy()))
            wins += scores["tql"] > scores["markov_qr"]
            matches += abs(scores["tql"] - optimum) <= 2.0
        assert wins >= 4
        assert matches >= 4
