"""
TQL Lab - Environments

Episodic finite MDPs with deterministic transitions and stochastic rewards:
the three-state counterexample MDP, the risky mini-grid, a discretized
risky Mountain-Car and random MDPs for property testing.

Histories are flat tuples (s0, a0, s1, a1, ..., s_t). Policies are callables
taking such a tuple and returning an action index.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .constants import (
    DEFAULT_GRID_LAYOUT,
    ENV_NAMES,
    GRID_ALPHABET,
    GRID_DEFAULTS,
    GRID_MOVES,
    MOUNTAIN_CAR,
    MOUNTAIN_CAR_DEFAULTS,
    PROB_SUM_TOL,
)
from .distributions import ReturnDistribution, convolve, dirac, normalize, sample
from .errors import MDPError, PolicyError, format_error

logger = logging.getLogger(__name__)

History = Tuple[int, ...]
Policy = Callable[[History], int]


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite episodic MDP with deterministic transitions M(s, a)."""

    name: str
    transition: np.ndarray
    rewards: Tuple[Tuple[ReturnDistribution, ...], ...]
    terminal: FrozenSet[int]
    gamma: float
    horizon: int
    initial: Tuple[Tuple[int, float], ...]
    state_labels: Tuple[str, ...] = ()
    action_labels: Tuple[str, ...] = ()

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=int)
        transition.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "terminal", frozenset(self.terminal))
        if not self.state_labels:
            labels = tuple(f"s{s}" for s in range(transition.shape[0]))
            object.__setattr__(self, "state_labels", labels)
        if not self.action_labels:
            labels = tuple(f"a{a}" for a in range(transition.shape[1]))
            object.__setattr__(self, "action_labels", labels)
        self._validate()

    def _fail(self, reason: str):
        raise MDPError(format_error("invalid_mdp", reason=reason))

    def _validate(self):
        if self.transition.ndim != 2 or 0 in self.transition.shape:
            self._fail("transition table must be a non-empty (states, actions) array")
        n_states, n_actions = self.transition.shape
        if np.any(self.transition < 0) or np.any(self.transition >= n_states):
            self._fail("transition target out of range")
        if len(self.rewards) != n_states or any(len(r) != n_actions for r in self.rewards):
            self._fail("reward table shape does not match the transition table")
        if not 0.0 <= self.gamma <= 1.0:
            self._fail(f"gamma {self.gamma} outside [0, 1]")
        if self.horizon < 1:
            raise MDPError(format_error("horizon", value=self.horizon))
        for s in self.terminal:
            if not 0 <= s < n_states:
                self._fail(f"terminal state {s} out of range")
            for a in range(n_actions):
                if self.transition[s, a] != s or self.rewards[s][a] != dirac(0.0):
                    self._fail(f"terminal state {s} is not absorbing with zero reward")
        total = sum(p for _, p in self.initial)
        if abs(total - 1.0) > PROB_SUM_TOL or any(p < 0 for _, p in self.initial):
            self._fail(f"initial probabilities sum to {total}")
        if any(not 0 <= s < n_states for s, _ in self.initial):
            self._fail("initial state out of range")
        if len(self.state_labels) != n_states or len(self.action_labels) != n_actions:
            self._fail("label counts do not match the table")

    @property
    def n_states(self) -> int:
        return int(self.transition.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.transition.shape[1])

    @property
    def initial_states(self) -> Tuple[int, ...]:
        return tuple(s for s, _ in self.initial)

    @property
    def multi_start(self) -> bool:
        return len(self.initial) > 1

    def next_state(self, state: int, action: int) -> int:
        return int(self.transition[state, action])

    def reward(self, state: int, action: int) -> ReturnDistribution:
        return self.rewards[state][action]

    def is_terminal(self, state: int) -> bool:
        return state in self.terminal

    def history_key(self, history: History) -> Tuple[int, ...]:
        """Action sequence of a history, prefixed with s0 when there are several starts."""
        actions = tuple(history[1::2])
        return (history[0],) + actions if self.multi_start else actions

    def sample_initial(self, rng: np.random.Generator) -> int:
        states = [s for s, _ in self.initial]
        probs = np.array([p for _, p in self.initial])
        return int(states[rng.choice(len(states), p=probs / probs.sum())])

    def __repr__(self) -> str:
        return (
            f"TabularMDP(name={self.name!r}, states={self.n_states}, "
            f"actions={self.n_actions}, gamma={self.gamma}, horizon={self.horizon})"
        )


def _absorbing_rows(n_states: int, n_actions: int, terminal: Sequence[int], transition, rewards):
    for s in terminal:
        transition[s, :] = s
        rewards[s] = [dirac(0.0)] * n_actions


def _build(name, transition, rewards, terminal, gamma, horizon, initial, **labels) -> TabularMDP:
    return TabularMDP(
        name=name,
        transition=transition,
        rewards=tuple(tuple(row) for row in rewards),
        terminal=frozenset(terminal),
        gamma=float(gamma),
        horizon=int(horizon),
        initial=tuple((int(s), float(p)) for s, p in initial),
        **labels,
    )


def _three_state(name: str, s1_a1_reward: float) -> TabularMDP:
    coin = normalize([(100.0, 0.9), (-10.0, 0.1)])
    transition = np.array([[1, 1], [2, 2], [2, 2]])
    rewards = [
        [coin, dirac(-5.0)],
        [coin, dirac(s1_a1_reward)],
        [dirac(0.0), dirac(0.0)],
    ]
    return _build(
        name,
        transition,
        rewards,
        terminal=[2],
        gamma=1.0,
        horizon=2,
        initial=[(0, 1.0)],
        state_labels=("s0", "s1", "terminal"),
        action_labels=("a0", "a1"),
    )


def three_state_mdp() -> TabularMDP:
    """Undiscounted s0 -> s1 -> terminal chain; a0 pays a risky coin, a1 pays -5."""
    return _three_state("three_state", -5.0)


def tie_counterexample_mdp() -> TabularMDP:
    """Three-state variant where both actions at s1 have CVaR(0.1) equal to -10."""
    return _three_state("tie_counterexample", -10.0)


@dataclass(frozen=True)
class GridLayout:
    """Mini-grid map plus its reward parameters."""

    rows: Tuple[str, ...]
    bonus_prob: float = GRID_DEFAULTS["bonus_prob"]
    bonus_value: float = GRID_DEFAULTS["bonus_value"]
    blue_value: float = GRID_DEFAULTS["blue_value"]
    orange_penalty: float = GRID_DEFAULTS["orange_penalty"]
    step_penalty: float = GRID_DEFAULTS["step_penalty"]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if not self.rows:
            self._fail("no rows")
        width = len(self.rows[0])
        if width == 0 or any(len(r) != width for r in self.rows):
            self._fail("rows must be non-empty and of equal length")
        unknown = set("".join(self.rows)) - GRID_ALPHABET
        if unknown:
            self._fail(f"unknown cell symbols {sorted(unknown)}")
        text = "".join(self.rows)
        if text.count("S") != 1 or text.count("G") != 1:
            self._fail("exactly one S and one G required")
        if not 0.0 <= self.bonus_prob <= 1.0:
            self._fail(f"bonus_prob {self.bonus_prob} outside [0, 1]")

    @staticmethod
    def _fail(reason: str):
        raise MDPError(format_error("invalid_layout", reason=reason))

    @classmethod
    def from_text(cls, text: str, **params) -> "GridLayout":
        """One row per line; whitespace inside a row and '#' comment lines are ignored."""
        rows = []
        for line in text.splitlines():
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            rows.append("".join(stripped.split()))
        return cls(tuple(rows), **params)

    @classmethod
    def load(cls, path, **params) -> "GridLayout":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **params)

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.rows), len(self.rows[0])

    def cell(self, r: int, c: int) -> str:
        return self.rows[r][c]

    def find(self, symbol: str) -> Tuple[int, int]:
        for r, row in enumerate(self.rows):
            c = row.find(symbol)
            if c >= 0:
                return r, c
        raise KeyError(symbol)

    @property
    def collectibles(self) -> Tuple[Tuple[int, int], ...]:
        """Yellow and blue cells in row-major order; position i is mask bit i."""
        return tuple(
            (r, c)
            for r, row in enumerate(self.rows)
            for c, ch in enumerate(row)
            if ch in "YB"
        )


def risky_grid(
    layout: Optional[GridLayout] = None,
    gamma: float = GRID_DEFAULTS["gamma"],
    horizon: int = GRID_DEFAULTS["horizon"],
    actions: str = GRID_DEFAULTS["actions"],
) -> TabularMDP:
    """
    Mini-grid with one-shot bonus cells.

    States encode (cell, collected-bitmask) as cell * 2**k + mask, where k is
    the number of Y/B cells. Every move costs step_penalty; entering an
    uncollected yellow adds a bonus_value coin, an uncollected blue adds
    blue_value, orange always adds orange_penalty. Moves off the grid stay
    put and cost only the step penalty. Goal states are terminal.
    """
    layout = layout or GridLayout.from_text(DEFAULT_GRID_LAYOUT)
    if actions not in GRID_MOVES:
        raise MDPError(format_error("invalid_layout", reason=f"unknown action set {actions!r}"))
    moves = GRID_MOVES[actions]
    n_rows, n_cols = layout.shape
    bits = {cell: i for i, cell in enumerate(layout.collectibles)}
    n_masks = 2 ** len(bits)
    n_states = n_rows * n_cols * n_masks

    yellow = normalize(
        [(layout.bonus_value, layout.bonus_prob), (0.0, 1.0 - layout.bonus_prob)]
    )
    step = dirac(layout.step_penalty)

    transition = np.zeros((n_states, len(moves)), dtype=int)
    rewards: List[List[ReturnDistribution]] = [[step] * len(moves) for _ in range(n_states)]
    terminal = []
    labels = []
    for r in range(n_rows):
        for c in range(n_cols):
            for mask in range(n_masks):
                s = (r * n_cols + c) * n_masks + mask
                labels.append(f"({r},{c})|{mask:0{max(1, len(bits))}b}")
                if layout.cell(r, c) == "G":
                    terminal.append(s)
                    continue
                for a, (_, (dr, dc)) in enumerate(moves):
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < n_rows and 0 <= nc < n_cols):
                        transition[s, a] = s
                        continue
                    symbol = layout.cell(nr, nc)
                    new_mask = mask
                    reward = step
                    if symbol in "YB" and not mask & (1 << bits[(nr, nc)]):
                        new_mask = mask | (1 << bits[(nr, nc)])
                        bonus = yellow if symbol == "Y" else dirac(layout.blue_value)
                        reward = convolve(step, bonus)
                    elif symbol == "O":
                        reward = dirac(layout.step_penalty + layout.orange_penalty)
                    transition[s, a] = (nr * n_cols + nc) * n_masks + new_mask
                    rewards[s][a] = reward
    _absorbing_rows(n_states, len(moves), terminal, transition, rewards)

    sr, sc = layout.find("S")
    return _build(
        "grid",
        transition,
        rewards,
        terminal,
        gamma,
        horizon,
        initial=[((sr * n_cols + sc) * n_masks, 1.0)],
        state_labels=tuple(labels),
        action_labels=tuple(name for name, _ in moves),
    )


def risky_penalty(c: float, action: float) -> ReturnDistribution:
    """-c(2 - |a|) with probability 1/(4 - 3|a|), otherwise 0."""
    if not 0.0 <= c <= 1.0:
        raise MDPError(format_error("penalty_scale", value=c))
    if not -1.0 <= action <= 1.0:
        raise MDPError(format_error("action_value", value=action))
    magnitude = abs(action)
    p = 1.0 / (4.0 - 3.0 * magnitude)
    return normalize([(-c * (2.0 - magnitude), p), (0.0, 1.0 - p)])


def _car_step(position: float, velocity: float, force: float) -> Tuple[float, float]:
    mc = MOUNTAIN_CAR
    velocity += force * mc["power"] - mc["gravity"] * math.cos(3.0 * position)
    velocity = min(max(velocity, -mc["max_speed"]), mc["max_speed"])
    position += velocity
    position = min(max(position, mc["min_position"]), mc["max_position"])
    if position == mc["min_position"] and velocity < 0:
        velocity = 0.0
    return position, velocity


def risky_mountain_car(
    c: float = MOUNTAIN_CAR_DEFAULTS["c"],
    position_bins: int = MOUNTAIN_CAR_DEFAULTS["position_bins"],
    velocity_bins: int = MOUNTAIN_CAR_DEFAULTS["velocity_bins"],
    action_values: Sequence[float] = MOUNTAIN_CAR_DEFAULTS["action_values"],
    horizon: int = MOUNTAIN_CAR_DEFAULTS["horizon"],
    gamma: float = MOUNTAIN_CAR_DEFAULTS["gamma"],
    action_repeat: int = MOUNTAIN_CAR_DEFAULTS["action_repeat"],
) -> TabularMDP:
    """
    Continuous Mountain-Car on a position x velocity bin grid with a risky penalty.

    Each decision applies its force for `action_repeat` physics steps starting
    from the bin centre, then re-bins the end point. Reward per decision is the
    control cost -0.1 a^2 per physics step, +100 on reaching the goal, plus the
    two-atom risky penalty. The goal is an extra absorbing state.
    """
    if position_bins < 2 or velocity_bins < 2:
        raise MDPError(format_error("invalid_mdp", reason="need at least 2 bins per axis"))
    if not action_values:
        raise MDPError(format_error("invalid_mdp", reason="no action values"))
    if action_repeat < 1:
        raise MDPError(format_error("invalid_mdp", reason="action_repeat must be >= 1"))
    if not 0.0 <= c <= 1.0:
        raise MDPError(format_error("penalty_scale", value=c))
    penalties = [risky_penalty(c, float(a)) for a in action_values]

    mc = MOUNTAIN_CAR
    pos_edges = np.linspace(mc["min_position"], mc["max_position"], position_bins + 1)
    vel_edges = np.linspace(-mc["max_speed"], mc["max_speed"], velocity_bins + 1)
    pos_centres = 0.5 * (pos_edges[:-1] + pos_edges[1:])
    vel_centres = 0.5 * (vel_edges[:-1] + vel_edges[1:])

    def to_bin(edges: np.ndarray, x: float) -> int:
        return int(np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2))

    n_actions = len(action_values)
    goal = position_bins * velocity_bins
    n_states = goal + 1
    transition = np.zeros((n_states, n_actions), dtype=int)
    rewards: List[List[ReturnDistribution]] = [[dirac(0.0)] * n_actions for _ in range(n_states)]

    for i, x0 in enumerate(pos_centres):
        for j, v0 in enumerate(vel_centres):
            s = i * velocity_bins + j
            for a, force in enumerate(action_values):
                force = float(np.clip(force, -1.0, 1.0))
                x, v = float(x0), float(v0)
                base = 0.0
                reached = False
                for _ in range(action_repeat):
                    x, v = _car_step(x, v, force)
                    base -= mc["control_cost"] * force**2
                    if x >= mc["goal_position"] and v >= mc["goal_velocity"]:
                        base += mc["goal_reward"]
                        reached = True
                        break
                if reached:
                    transition[s, a] = goal
                else:
                    transition[s, a] = to_bin(pos_edges, x) * velocity_bins + to_bin(vel_edges, v)
                rewards[s][a] = convolve(dirac(base), penalties[a])
    _absorbing_rows(n_states, n_actions, [goal], transition, rewards)

    zero_v = to_bin(vel_edges, 0.0)
    starts = [
        i * velocity_bins + zero_v
        for i, x in enumerate(pos_centres)
        if mc["init_low"] <= x <= mc["init_high"]
    ] or [to_bin(pos_edges, 0.5 * (mc["init_low"] + mc["init_high"])) * velocity_bins + zero_v]
    initial = [(s, 1.0 / len(starts)) for s in starts]

    labels = tuple(
        f"x{pos_centres[s // velocity_bins]:.3f},v{vel_centres[s % velocity_bins]:.4f}"
        for s in range(goal)
    ) + ("goal",)
    return _build(
        "mountain_car",
        transition,
        rewards,
        [goal],
        gamma,
        horizon,
        initial,
        state_labels=labels,
        action_labels=tuple(f"{float(a):g}" for a in action_values),
    )


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    max_reward_atoms: int = 3,
    gamma: float = 1.0,
    horizon: int = 3,
    n_initial: int = 1,
) -> TabularMDP:
    """
    Random deterministic-transition MDP for property tests.

    The last state is terminal. Every other state has one forced action that
    moves to a higher index whose forced path reaches the terminal in at most
    horizon - 1 further steps, so the terminal is reachable within the horizon
    from every state. Rewards are mixtures of up to max_reward_atoms values in
    [-10, 10].
    """
    if n_states < 1 or n_actions < 1 or max_reward_atoms < 1:
        raise MDPError(format_error("invalid_mdp", reason="sizes must be >= 1"))
    if horizon < 1:
        raise MDPError(format_error("horizon", value=horizon))
    terminal = n_states - 1
    transition = rng.integers(0, n_states, size=(n_states, n_actions))
    # steps to the terminal along forced actions
    depth = np.zeros(n_states, dtype=int)
    for s in range(terminal - 1, -1, -1):
        candidates = [t for t in range(s + 1, n_states) if depth[t] < horizon]
        target = int(rng.choice(candidates))
        transition[s, rng.integers(n_actions)] = target
        depth[s] = depth[target] + 1
    rewards: List[List[ReturnDistribution]] = []
    for s in range(n_states):
        row = []
        for _ in range(n_actions):
            k = int(rng.integers(1, max_reward_atoms + 1))
            values = rng.uniform(-10.0, 10.0, size=k)
            probs = rng.dirichlet(np.ones(k))
            row.append(ReturnDistribution(values, probs))
        rewards.append(row)
    _absorbing_rows(n_states, n_actions, [terminal], transition, rewards)

    starts = list(range(max(1, min(n_initial, n_states - 1)))) if n_states > 1 else [0]
    initial = [(s, 1.0 / len(starts)) for s in starts]
    return _build("random", transition, rewards, [terminal], gamma, horizon, initial)


def make_env(name: str, gamma: Optional[float] = None, horizon: Optional[int] = None, **params) -> TabularMDP:
    """Build an environment by its config name."""
    if name == "three_state":
        mdp = three_state_mdp()
    elif name == "grid":
        layout_file = params.pop("layout_file", None)
        actions = params.pop("actions", GRID_DEFAULTS["actions"])
        layout = (
            GridLayout.load(layout_file, **params)
            if layout_file
            else GridLayout.from_text(DEFAULT_GRID_LAYOUT, **params)
        )
        return risky_grid(
            layout,
            gamma=GRID_DEFAULTS["gamma"] if gamma is None else gamma,
            horizon=GRID_DEFAULTS["horizon"] if horizon is None else horizon,
            actions=actions,
        )
    elif name == "mountain_car":
        if gamma is not None:
            params["gamma"] = gamma
        if horizon is not None:
            params["horizon"] = horizon
        return risky_mountain_car(**params)
    elif name == "random":
        seed = params.pop("seed", 0)
        return random_mdp(
            np.random.default_rng(seed),
            gamma=1.0 if gamma is None else gamma,
            horizon=3 if horizon is None else horizon,
            **params,
        )
    else:
        raise MDPError(format_error("unknown_env", name=name, choices=", ".join(ENV_NAMES)))

    if gamma is None and horizon is None:
        return mdp
    return _build(
        mdp.name,
        mdp.transition.copy(),
        mdp.rewards,
        mdp.terminal,
        mdp.gamma if gamma is None else gamma,
        mdp.horizon if horizon is None else horizon,
        mdp.initial,
        state_labels=mdp.state_labels,
        action_labels=mdp.action_labels,
    )


@dataclass
class Rollout:
    """One simulated episode."""

    trajectory: List[Tuple[int, int, float]] = field(default_factory=list)
    episode_return: float = 0.0
    history: History = ()

    @property
    def actions(self) -> Tuple[int, ...]:
        return tuple(a for _, a, _ in self.trajectory)

    def __iter__(self):
        # unpacks as (trajectory, episode_return)
        yield self.trajectory
        yield self.episode_return


def rollout(mdp: TabularMDP, policy: Policy, rng: np.random.Generator) -> Rollout:
    """
    Simulate one episode to a terminal state or the horizon.

    Args:
        mdp: Environment
        policy: Callable on the flat history tuple
        rng: Source of initial-state and reward randomness

    Returns:
        Rollout with (state, action, reward) steps and the discounted return
    """
    state = mdp.sample_initial(rng)
    history: History = (state,)
    result = Rollout()
    discount = 1.0
    for _ in range(mdp.horizon):
        if mdp.is_terminal(state):
            break
        action = policy(history)
        if not isinstance(action, (int, np.integer)) or not 0 <= action < mdp.n_actions:
            raise PolicyError(format_error("invalid_action", action=action, history=history))
        action = int(action)
        reward = sample(mdp.reward(state, action), rng)
        result.trajectory.append((state, action, reward))
        result.episode_return += discount * reward
        discount *= mdp.gamma
        state = mdp.next_state(state, action)
        history = history + (action, state)
    result.history = history
    return result
