"""
TQL Lab - Quantile Table Agents

Tabular quantile-regression learners:

- ``markov_qr``: a risk-greedy critic keyed on (state, action). It picks the
  action maximizing the risk of the future return only.
- ``tql``: Trajectory Q-Learning. A history critic keyed on a rolling window of
  the history learns the distribution of the return accumulated since the
  window start; its targets add the realized prefix return to a bootstrap from
  the Markovian critic. Actions maximize the risk of that historical return.
"""

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .constants import (
    AGENT_DEFAULTS,
    AGENT_KINDS,
    DEFAULT_EVAL_EPISODES,
    DEFAULT_EVAL_EVERY,
    DEFAULT_TOTAL_STEPS,
)
from .distributions import ReturnDistribution, sample
from .envs import History, TabularMDP, rollout
from .errors import AgentError, format_error
from .operators import greedy_path, lowest_index
from .risk import RiskMeasure, evaluate, evaluate_sampled

logger = logging.getLogger(__name__)

TableKey = Tuple[Hashable, int]


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters shared by both agent kinds."""

    n_quantiles: int = AGENT_DEFAULTS["n_quantiles"]
    learning_rate: float = AGENT_DEFAULTS["learning_rate"]
    gamma: Optional[float] = AGENT_DEFAULTS["gamma"]
    epsilon_init: float = AGENT_DEFAULTS["epsilon_init"]
    epsilon_final: float = AGENT_DEFAULTS["epsilon_final"]
    epsilon_decay_steps: int = AGENT_DEFAULTS["epsilon_decay_steps"]
    epsilon_test: float = AGENT_DEFAULTS["epsilon_test"]
    buffer_size: int = AGENT_DEFAULTS["buffer_size"]
    batch_size: int = AGENT_DEFAULTS["batch_size"]
    start_timesteps: int = AGENT_DEFAULTS["start_timesteps"]
    target_update_frequency: int = AGENT_DEFAULTS["target_update_frequency"]
    history_window: Optional[int] = AGENT_DEFAULTS["history_window"]
    huber_kappa: float = AGENT_DEFAULTS["huber_kappa"]
    sample_size: int = AGENT_DEFAULTS["sample_size"]
    gradient_steps: int = AGENT_DEFAULTS["gradient_steps"]
    stochastic_fractions: bool = AGENT_DEFAULTS["stochastic_fractions"]
    default_value: float = AGENT_DEFAULTS["default_value"]

    def __post_init__(self):
        problems = []
        for name in (
            "n_quantiles",
            "buffer_size",
            "batch_size",
            "target_update_frequency",
            "sample_size",
            "gradient_steps",
            "epsilon_decay_steps",
        ):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.start_timesteps < 0:
            problems.append("start_timesteps must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if not self.huber_kappa > 0:
            problems.append("huber_kappa must be positive")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            problems.append("gamma must lie in [0, 1]")
        if not 0.0 <= self.epsilon_final <= self.epsilon_init <= 1.0:
            problems.append("need 0 <= epsilon_final <= epsilon_init <= 1")
        if not 0.0 <= self.epsilon_test <= 1.0:
            problems.append("epsilon_test must lie in [0, 1]")
        if self.history_window is not None and self.history_window < 0:
            problems.append("history_window must be >= 0")
        if problems:
            raise AgentError(format_error("agent_config", reason="; ".join(problems)))

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise AgentError(format_error("agent_config", reason=f"unknown fields {sorted(unknown)}"))
        return cls(**values)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def epsilon(self, step: int) -> float:
        """Linear decay from epsilon_init to epsilon_final over epsilon_decay_steps."""
        frac = min(1.0, max(0, step) / self.epsilon_decay_steps)
        return self.epsilon_init + frac * (self.epsilon_final - self.epsilon_init)


class QuantileTable:
    """N sorted quantiles per (key, action); unseen entries hold default_value."""

    def __init__(self, n_actions: int, n_quantiles: int, default_value: float = 0.0):
        if n_actions < 1 or n_quantiles < 1:
            raise AgentError(format_error("agent_config", reason="table sizes must be >= 1"))
        self.n_actions = n_actions
        self.n_quantiles = n_quantiles
        self.default_value = float(default_value)
        self.taus = (2.0 * np.arange(n_quantiles) + 1.0) / (2.0 * n_quantiles)
        self._entries: Dict[TableKey, np.ndarray] = {}

    def get(self, key: Hashable, action: int) -> np.ndarray:
        """Stored quantiles, or the default entry, as a read-only array."""
        values = self._entries.get((key, action))
        if values is None:
            values = np.full(self.n_quantiles, self.default_value)
            values.setflags(write=False)
        return values

    def set(self, key: Hashable, action: int, values: Sequence[float]):
        values = np.sort(np.asarray(values, dtype=float))
        if values.shape != (self.n_quantiles,):
            raise AgentError(
                format_error("agent_config", reason=f"entry needs {self.n_quantiles} quantiles")
            )
        values.setflags(write=False)
        self._entries[(key, action)] = values

    def scores(
        self,
        key: Hashable,
        beta: RiskMeasure,
        k_samples: int,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """Sampled risk of every action's quantiles at key."""
        return np.array(
            [evaluate_sampled(beta, self.get(key, a), k_samples, rng) for a in range(self.n_actions)]
        )

    def distribution(self, key: Hashable, action: int) -> ReturnDistribution:
        return ReturnDistribution(self.get(key, action))

    def copy(self) -> "QuantileTable":
        clone = QuantileTable(self.n_actions, self.n_quantiles, self.default_value)
        clone._entries = dict(self._entries)
        return clone

    def keys(self) -> List[TableKey]:
        return list(self._entries)

    def __contains__(self, item: TableKey) -> bool:
        return item in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantileTable):
            return NotImplemented
        return (
            self.n_actions == other.n_actions
            and self.n_quantiles == other.n_quantiles
            and self._entries.keys() == other._entries.keys()
            and all(np.array_equal(v, other._entries[k]) for k, v in self._entries.items())
        )

    def save(self, path) -> Path:
        """Write one `key<TAB>action<TAB>q0 q1 ...` line per entry."""
        path = Path(path)
        lines = [
            f"# n_actions={self.n_actions} n_quantiles={self.n_quantiles} "
            f"default_value={self.default_value!r}"
        ]
        for (key, action), values in self._entries.items():
            encoded = json.dumps(list(key) if isinstance(key, tuple) else key)
            lines.append(f"{encoded}\t{action}\t" + " ".join(f"{v:.17g}" for v in values))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "QuantileTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split())
        table = cls(
            int(header["n_actions"]), int(header["n_quantiles"]), float(header["default_value"])
        )
        for line in lines[1:]:
            if not line.strip():
                continue
            raw_key, action, values = line.split("\t")
            key = json.loads(raw_key)
            table.set(tuple(key) if isinstance(key, list) else key, int(action), values.split())
        return table

    def __repr__(self) -> str:
        return (
            f"QuantileTable(actions={self.n_actions}, quantiles={self.n_quantiles}, "
            f"entries={len(self._entries)})"
        )


@dataclass(frozen=True)
class Transition:
    """One environment step with its windowed history bookkeeping."""

    history_key: Tuple[int, ...]
    prefix_return: float
    prefix_steps: int
    depth: int
    state: int
    action: int
    reward: float
    next_state: int
    next_history_key: Tuple[int, ...]
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise AgentError(format_error("agent_config", reason="buffer capacity must be >= 1"))
        self.capacity = capacity
        self._items: List[Transition] = []
        self._next = 0

    def add(self, transition: Transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        if not self._items:
            raise AgentError(format_error("agent_config", reason="cannot sample an empty buffer"))
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


# --- quantile regression ---------------------------------------------------


def _check_kappa(kappa: float):
    if not kappa > 0:
        raise AgentError(format_error("kappa", value=kappa))


def quantile_huber(u, tau, kappa: float):
    """|tau - 1{u < 0}| * Huber_kappa(u)."""
    _check_kappa(kappa)
    u = np.asarray(u, dtype=float)
    abs_u = np.abs(u)
    huber = np.where(abs_u <= kappa, 0.5 * u * u, kappa * (abs_u - 0.5 * kappa))
    out = np.abs(tau - (u < 0)) * huber
    return float(out) if out.ndim == 0 else out


def quantile_huber_grad(u, tau, kappa: float):
    """Derivative of quantile_huber with respect to u."""
    _check_kappa(kappa)
    u = np.asarray(u, dtype=float)
    out = np.abs(tau - (u < 0)) * np.clip(u, -kappa, kappa)
    return float(out) if out.ndim == 0 else out


def qr_update(
    table: QuantileTable,
    key: Hashable,
    action: int,
    targets: Sequence[float],
    learning_rate: float,
    kappa: float,
) -> np.ndarray:
    """
    Move each stored quantile along the mean loss subgradient against all targets.

    Args:
        table: Table to update in place
        key: Entry key
        action: Entry action
        targets: Target samples (any length)
        learning_rate: Step size
        kappa: Huber threshold

    Returns:
        The new, sorted entry
    """
    theta = table.get(key, action)
    targets = np.asarray(targets, dtype=float)
    u = targets[None, :] - theta[:, None]
    step = quantile_huber_grad(u, table.taus[:, None], kappa).mean(axis=1)
    table.set(key, action, theta + learning_rate * step)
    return table.get(key, action)


def _greedy(scores: np.ndarray) -> int:
    return lowest_index(scores)


def qr_target_markov(
    batch: Iterable[Transition],
    online: QuantileTable,
    target: QuantileTable,
    beta: RiskMeasure,
    gamma: float,
    k_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> List[np.ndarray]:
    """r + gamma * target(s', a') with a' risk-greedy on the online table at s'."""
    n = online.n_quantiles
    greedy: Dict[int, int] = {}
    out = []
    for tr in batch:
        if tr.done or gamma == 0:
            out.append(np.full(n, tr.reward))
            continue
        if tr.next_state not in greedy:
            greedy[tr.next_state] = _greedy(online.scores(tr.next_state, beta, k_samples, rng))
        out.append(tr.reward + gamma * target.get(tr.next_state, greedy[tr.next_state]))
    return out


def qr_target_history(
    batch: Iterable[Transition],
    history: QuantileTable,
    markov_target: QuantileTable,
    beta: RiskMeasure,
    gamma: float,
    k_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> List[np.ndarray]:
    """
    prefix_return + gamma^(prefix_steps + 1) * markov_target(s', a').

    a' is risk-greedy on the history critic at the successor's history key.
    Done transitions keep only the realized prefix return.
    """
    n = history.n_quantiles
    greedy: Dict[Tuple[int, ...], int] = {}
    out = []
    for tr in batch:
        if tr.done:
            out.append(np.full(n, tr.prefix_return))
            continue
        if tr.next_history_key not in greedy:
            scores = history.scores(tr.next_history_key, beta, k_samples, rng)
            greedy[tr.next_history_key] = _greedy(scores)
        bootstrap = markov_target.get(tr.next_state, greedy[tr.next_history_key])
        out.append(tr.prefix_return + gamma ** (tr.prefix_steps + 1) * bootstrap)
    return out


def _apply_grouped(
    table: QuantileTable,
    keyed_targets: Iterable[Tuple[TableKey, np.ndarray]],
    learning_rate: float,
    kappa: float,
):
    # samples sharing an entry contribute one averaged step
    grouped: Dict[TableKey, List[np.ndarray]] = defaultdict(list)
    for key, targets in keyed_targets:
        grouped[key].append(targets)
    for (key, action), parts in grouped.items():
        qr_update(table, key, action, np.concatenate(parts), learning_rate, kappa)


# --- agent -----------------------------------------------------------------


class QuantileAgent:
    """Owns the critics, replay buffer and target table of one training run."""

    def __init__(
        self,
        kind: str,
        mdp: TabularMDP,
        beta: RiskMeasure,
        config: Optional[AgentConfig] = None,
    ):
        if kind not in AGENT_KINDS:
            raise AgentError(format_error("agent_kind", kind=kind, choices=", ".join(AGENT_KINDS)))
        self.kind = kind
        self.mdp = mdp
        self.beta = beta
        self.config = config or AgentConfig()
        self.gamma = mdp.gamma if self.config.gamma is None else self.config.gamma
        self.logger = logging.getLogger(__name__)

        n, d = self.config.n_quantiles, self.config.default_value
        self.markov = QuantileTable(mdp.n_actions, n, d)
        self.markov_target = self.markov.copy()
        self.history = QuantileTable(mdp.n_actions, n, d) if kind == "tql" else None
        self.buffer = ReplayBuffer(self.config.buffer_size)
        self.updates = 0

    def history_key(self, history: History) -> Tuple[int, ...]:
        """The last history_window (state, action) pairs plus the current state."""
        window = self.config.history_window
        if window is None:
            return tuple(history)
        return tuple(history[max(0, len(history) - 1 - 2 * window):])

    def window_start(self, depth: int) -> int:
        window = self.config.history_window
        return 0 if window is None else max(0, depth - window)

    def scores(self, history: History, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        cfg = self.config
        if not cfg.stochastic_fractions:
            rng = None
        if self.kind == "tql":
            return self.history.scores(self.history_key(history), self.beta, cfg.sample_size, rng)
        return self.markov.scores(history[-1], self.beta, cfg.sample_size, rng)

    def greedy_action(self, history: History, rng: Optional[np.random.Generator] = None) -> int:
        return _greedy(self.scores(history, rng))

    def act(self, history: History, epsilon: float, rng: np.random.Generator) -> int:
        """Epsilon-greedy; always consumes one uniform draw first."""
        if rng.random() < epsilon:
            return int(rng.integers(self.mdp.n_actions))
        return self.greedy_action(history, rng)

    def greedy_policy(self) -> Callable[[History], int]:
        return lambda history: self.greedy_action(history)

    def update(self, rng: np.random.Generator):
        """One gradient step: Markovian critic first, then the history critic."""
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, rng)
        frac_rng = rng if cfg.stochastic_fractions else None

        targets = qr_target_markov(
            batch, self.markov, self.markov_target, self.beta, self.gamma, cfg.sample_size, frac_rng
        )
        _apply_grouped(
            self.markov,
            (((tr.state, tr.action), y) for tr, y in zip(batch, targets)),
            cfg.learning_rate,
            cfg.huber_kappa,
        )
        if self.history is not None:
            targets = qr_target_history(
                batch, self.history, self.markov_target, self.beta, self.gamma, cfg.sample_size, frac_rng
            )
            _apply_grouped(
                self.history,
                (((tr.history_key, tr.action), y) for tr, y in zip(batch, targets)),
                cfg.learning_rate,
                cfg.huber_kappa,
            )
        self.updates += 1

    def sync_target(self):
        self.markov_target = self.markov.copy()

    def save(self, directory) -> List[Path]:
        directory = Path(directory)
        written = [self.markov.save(directory / "markov_table.txt")]
        if self.history is not None:
            written.append(self.history.save(directory / "history_table.txt"))
        return written

    def __repr__(self) -> str:
        return f"QuantileAgent(kind={self.kind!r}, mdp={self.mdp.name!r}, beta={self.beta})"


# --- training loop ---------------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    """One periodic greedy evaluation."""

    step: int
    measure_value: float
    mean_return: float
    actions: Tuple[int, ...]


@dataclass
class TrainingLog:
    rows: List[EvalRow] = field(default_factory=list)
    agent: Optional[QuantileAgent] = None
    final_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final(self) -> EvalRow:
        return self.rows[-1]


def evaluate_policy(
    mdp: TabularMDP,
    policy: Callable[[History], int],
    beta: RiskMeasure,
    episodes: int,
    rng: np.random.Generator,
) -> Tuple[float, float, np.ndarray]:
    """Empirical risk and mean of the discounted return over simulated episodes."""
    returns = np.array([rollout(mdp, policy, rng).episode_return for _ in range(episodes)])
    return evaluate(beta, ReturnDistribution(returns)), float(returns.mean()), returns


def train(
    kind: str,
    mdp: TabularMDP,
    beta: RiskMeasure,
    config: Optional[AgentConfig] = None,
    rng: Optional[np.random.Generator] = None,
    total_steps: int = DEFAULT_TOTAL_STEPS,
    eval_every: int = DEFAULT_EVAL_EVERY,
    eval_episodes: int = DEFAULT_EVAL_EPISODES,
    eval_rng: Optional[np.random.Generator] = None,
    callback: Optional[Callable[[EvalRow], None]] = None,
) -> TrainingLog:
    """
    Run the collect / update / evaluate loop.

    Args:
        kind: "markov_qr" or "tql"
        mdp: Environment
        beta: Risk measure for action selection and evaluation
        config: Agent hyperparameters
        rng: Training randomness (exploration, rewards, replay sampling)
        total_steps: Environment steps
        eval_every: Steps between greedy evaluations; the last step is always evaluated
        eval_episodes: Rollouts per evaluation
        eval_rng: Evaluation randomness (default: derived once from rng)
        callback: Called with each EvalRow

    Returns:
        TrainingLog with evaluation rows, the agent and the last evaluation's returns
    """
    if total_steps < 1 or eval_every < 1 or eval_episodes < 1:
        raise AgentError(format_error("agent_config", reason="step and episode counts must be >= 1"))
    agent = QuantileAgent(kind, mdp, beta, config)
    cfg = agent.config
    rng = rng if rng is not None else np.random.default_rng(0)
    eval_rng = eval_rng if eval_rng is not None else np.random.default_rng(rng.integers(2**32))
    log = TrainingLog(agent=agent)

    state = mdp.sample_initial(rng)
    history: History = (state,)
    rewards: List[float] = []
    for step in range(1, total_steps + 1):
        depth = len(rewards)
        action = agent.act(history, cfg.epsilon(step - 1), rng)
        reward = sample(mdp.reward(state, action), rng)
        next_state = mdp.next_state(state, action)
        next_history = history + (action, next_state)
        rewards.append(reward)
        done = mdp.is_terminal(next_state) or depth + 1 >= mdp.horizon

        start = agent.window_start(depth)
        prefix = float(
            sum(agent.gamma ** (i - start) * rewards[i] for i in range(start, depth + 1))
        )
        agent.buffer.add(
            Transition(
                history_key=agent.history_key(history),
                prefix_return=prefix,
                prefix_steps=depth - start,
                depth=depth,
                state=state,
                action=action,
                reward=reward,
                next_state=next_state,
                next_history_key=agent.history_key(next_history),
                done=done,
            )
        )

        if step > cfg.start_timesteps:
            for _ in range(cfg.gradient_steps):
                agent.update(rng)
        if step % cfg.target_update_frequency == 0:
            agent.sync_target()

        if done:
            state = mdp.sample_initial(rng)
            history = (state,)
            rewards = []
        else:
            state, history = next_state, next_history

        if step % eval_every == 0 or step == total_steps:
            if cfg.epsilon_test > 0:
                policy = lambda h: agent.act(h, cfg.epsilon_test, eval_rng)  # noqa: E731
            else:
                policy = agent.greedy_policy()
            measure, mean_return, returns = evaluate_policy(mdp, policy, beta, eval_episodes, eval_rng)
            row = EvalRow(step, measure, mean_return, greedy_path(mdp, agent.greedy_policy()))
            log.rows.append(row)
            log.final_returns = returns
            logger.info(
                f"[{kind}] step {step}: {beta} = {measure:.4f}, mean return = {mean_return:.4f}"
            )
            if callback is not None:
                callback(row)
    return log
