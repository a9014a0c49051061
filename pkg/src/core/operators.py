"""
TQL Lab - Exact Operators

Tabular implementations of the distributional Bellman operators:

- Markovian policy evaluation and mean-greedy value iteration on (s, a) maps.
- The risk-sensitive Markov optimality operator, which greedily maximizes the
  risk of the future return only and is therefore biased.
- History-relied (HR) evaluation and improvement on the tree of action
  histories, which score whole-trajectory returns.

History maps store suffix distributions S(h, a): the discounted return from
the decision at h onwards. The historical return distribution at h is
prefix(h) + gamma^t * S(h, a), with prefix(h) the exact distribution of the
rewards already collected along h.
"""

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import (
    DEFAULT_MAX_ITERS,
    DEFAULT_MAX_NODES,
    DEFAULT_MAX_POLICIES,
    DEFAULT_SWEEPS,
    TIE_TOL,
)
from .distributions import (
    KeyedDistributionMap,
    ReturnDistribution,
    affine,
    convolve,
    dirac,
    max_wasserstein,
    mix,
    prune,
    wasserstein,
)
from .envs import History, TabularMDP
from .errors import BudgetExceededError, DistributionError, PolicyError, format_error
from .risk import RiskMeasure, evaluate

logger = logging.getLogger(__name__)

HistoryKey = Tuple[int, ...]
TieRule = Callable[[Sequence[float]], int]

_ZERO = dirac(0.0)


# --- tie rules -------------------------------------------------------------


def _tied(scores: Sequence[float]) -> List[int]:
    scores = np.asarray(scores, dtype=float)
    best = scores.max()
    return [int(i) for i in np.flatnonzero(scores >= best - TIE_TOL)]


def lowest_index(scores: Sequence[float]) -> int:
    """Best action, lowest index among ties."""
    return _tied(scores)[0]


class AlternatingTieRule:
    """Round-robin over tied actions; counts only calls that actually tie."""

    def __init__(self):
        self._calls = 0

    def __call__(self, scores: Sequence[float]) -> int:
        tied = _tied(scores)
        if len(tied) == 1:
            return tied[0]
        choice = tied[self._calls % len(tied)]
        self._calls += 1
        return choice


def make_tie_rule(name: str) -> TieRule:
    if name in ("lowest_index", "lowest-action-index"):
        return lowest_index
    if name == "alternating":
        return AlternatingTieRule()
    raise ValueError(f"Unknown tie rule {name!r}")


# --- policies --------------------------------------------------------------


@dataclass(frozen=True)
class MarkovPolicy:
    """Deterministic state -> action table."""

    actions: Tuple[int, ...]

    def action(self, state: int) -> int:
        return self.actions[state]

    def __call__(self, history: History) -> int:
        return self.actions[history[-1]]


@dataclass
class HistoryPolicy:
    """Deterministic history -> action map; unseen histories take default_action."""

    actions: Dict[HistoryKey, int] = field(default_factory=dict)
    multi_start: bool = False
    default_action: int = 0

    def action(self, key: HistoryKey) -> int:
        return self.actions.get(key, self.default_action)

    def key_of(self, history: History) -> HistoryKey:
        actions = tuple(history[1::2])
        return (history[0],) + actions if self.multi_start else actions

    def __call__(self, history: History) -> int:
        return self.action(self.key_of(history))

    @classmethod
    def from_policy(cls, tree: "HistoryTree", policy: Callable[[History], int]) -> "HistoryPolicy":
        """Tabulate any history callable (e.g. a MarkovPolicy) on the decision nodes."""
        actions = {node.key: int(policy(node.steps)) for node in tree.decision_nodes()}
        return cls(actions, multi_start=tree.mdp.multi_start)


AnyPolicy = Union[HistoryPolicy, MarkovPolicy, Callable[[History], int]]


def _checked(mdp: TabularMDP, action, history: History) -> int:
    if not isinstance(action, (int, np.integer)) or not 0 <= action < mdp.n_actions:
        raise PolicyError(format_error("invalid_action", action=action, history=history))
    return int(action)


# --- history tree ----------------------------------------------------------


@dataclass(frozen=True)
class HistoryNode:
    """A history h_t with its exact prefix-return distribution."""

    key: HistoryKey
    steps: History
    state: int
    depth: int
    prefix_dist: ReturnDistribution


class HistoryTree:
    """All histories reachable from the initial states within the horizon."""

    def __init__(
        self,
        mdp: TabularMDP,
        max_nodes: int = DEFAULT_MAX_NODES,
        max_atoms: Optional[int] = None,
    ):
        """
        Enumerate the tree.

        Args:
            mdp: Environment
            max_nodes: Node budget
            max_atoms: Optional atom cap for prefix distributions

        Raises:
            BudgetExceededError: if the tree has more than max_nodes nodes
        """
        self.mdp = mdp
        self.max_nodes = max_nodes
        self.max_atoms = max_atoms
        self.prune_error = 0.0
        self.nodes: Dict[HistoryKey, HistoryNode] = {}
        self.roots: List[Tuple[HistoryKey, float]] = []

        frontier: List[HistoryNode] = []
        for s0, p in mdp.initial:
            key = (s0,) if mdp.multi_start else ()
            node = HistoryNode(key, (s0,), s0, 0, _ZERO)
            self._add(node)
            self.roots.append((key, p))
            frontier.append(node)

        while frontier:
            next_frontier = []
            for node in frontier:
                if not self.is_decision(node):
                    continue
                discount = mdp.gamma**node.depth
                for a in range(mdp.n_actions):
                    s_next = mdp.next_state(node.state, a)
                    prefix = convolve(node.prefix_dist, affine(mdp.reward(node.state, a), discount, 0.0))
                    prefix = self._cap(prefix)
                    child = HistoryNode(
                        node.key + (a,),
                        node.steps + (a, s_next),
                        s_next,
                        node.depth + 1,
                        prefix,
                    )
                    self._add(child)
                    next_frontier.append(child)
            frontier = next_frontier
        logger.debug(f"History tree for {mdp.name}: {len(self.nodes)} nodes")

    def _add(self, node: HistoryNode):
        if len(self.nodes) >= self.max_nodes:
            raise BudgetExceededError(
                format_error("node_budget", limit=self.max_nodes, size=len(self.nodes) + 1),
                size=len(self.nodes) + 1,
                limit=self.max_nodes,
            )
        self.nodes[node.key] = node

    def _cap(self, d: ReturnDistribution) -> ReturnDistribution:
        if self.max_atoms is None:
            return d
        d, err = prune(d, self.max_atoms)
        self.prune_error += err
        return d

    def is_decision(self, node: HistoryNode) -> bool:
        return node.depth < self.mdp.horizon and not self.mdp.is_terminal(node.state)

    def decision_nodes(self, deepest_first: bool = False) -> List[HistoryNode]:
        nodes = [n for n in self.nodes.values() if self.is_decision(n)]
        if deepest_first:
            nodes.sort(key=lambda n: -n.depth)
        return nodes

    def decision_keys(self) -> List[Tuple[HistoryKey, int]]:
        return [(n.key, a) for n in self.decision_nodes() for a in range(self.mdp.n_actions)]

    def child(self, key: HistoryKey, action: int) -> HistoryNode:
        return self.nodes[key + (action,)]

    def historical(self, key: HistoryKey, suffix: ReturnDistribution) -> ReturnDistribution:
        """prefix(h) + gamma^t * suffix."""
        node = self.nodes[key]
        return convolve(node.prefix_dist, affine(suffix, self.mdp.gamma**node.depth, 0.0))

    def __len__(self) -> int:
        return len(self.nodes)


def _policy_action(policy: AnyPolicy, node: HistoryNode, mdp: TabularMDP) -> int:
    if isinstance(policy, HistoryPolicy):
        return _checked(mdp, policy.action(node.key), node.steps)
    return _checked(mdp, policy(node.steps), node.steps)


def _hr_backup(tree: HistoryTree, policy: AnyPolicy, suffix: KeyedDistributionMap, node, a):
    """R(s, a) + gamma * S(child, pi(child)); the continuation is zero past the tree."""
    mdp = tree.mdp
    child = tree.child(node.key, a)
    reward = mdp.reward(node.state, a)
    if not tree.is_decision(child):
        return reward
    cont_key = (child.key, _policy_action(policy, child, mdp))
    if cont_key not in suffix:
        raise DistributionError(format_error("missing_key", key=cont_key))
    return convolve(reward, affine(suffix[cont_key], mdp.gamma, 0.0))


@dataclass
class HistoryEvaluation:
    """Exact Z^pi over the history tree."""

    tree: HistoryTree
    policy: AnyPolicy
    suffix: KeyedDistributionMap
    prune_error: float = 0.0
    _historical: Dict[Tuple[HistoryKey, int], ReturnDistribution] = field(
        default_factory=dict, repr=False
    )

    def historical(self, key: HistoryKey, action: int) -> ReturnDistribution:
        """Whole-trajectory return distribution given history key and action."""
        cached = self._historical.get((key, action))
        if cached is None:
            cached = self.tree.historical(key, self.suffix[(key, action)])
            self._historical[(key, action)] = cached
        return cached

    def historical_map(self) -> KeyedDistributionMap:
        return {k: self.historical(*k) for k in self.suffix}

    def action(self, key: HistoryKey) -> int:
        return _policy_action(self.policy, self.tree.nodes[key], self.tree.mdp)

    def root_distribution(self) -> ReturnDistribution:
        """Trajectory return distribution from the initial-state distribution."""
        parts = []
        for key, p in self.tree.roots:
            node = self.tree.nodes[key]
            dist = self.historical(key, self.action(key)) if self.tree.is_decision(node) else _ZERO
            parts.append((p, dist))
        return mix(parts)


def hr_policy_eval(
    mdp: TabularMDP,
    policy: AnyPolicy,
    tree: Optional[HistoryTree] = None,
    max_nodes: int = DEFAULT_MAX_NODES,
    max_atoms: Optional[int] = None,
) -> HistoryEvaluation:
    """
    Evaluate a history policy exactly by backward induction over the tree.

    Suffix distributions are computed once per (history, action), deepest
    histories first.
    """
    tree = tree or HistoryTree(mdp, max_nodes=max_nodes, max_atoms=max_atoms)
    suffix: KeyedDistributionMap = {}
    error = 0.0
    for node in tree.decision_nodes(deepest_first=True):
        for a in range(mdp.n_actions):
            dist = _hr_backup(tree, policy, suffix, node, a)
            if max_atoms is not None:
                dist, err = prune(dist, max_atoms)
                error += err
            suffix[(node.key, a)] = dist
    if error > 0:
        logger.warning(f"HR evaluation pruned atoms with accumulated W1 error {error:.3g}")
    return HistoryEvaluation(tree, policy, suffix, prune_error=error + tree.prune_error)


def hr_greedy_improve(
    evaluation: HistoryEvaluation,
    beta: RiskMeasure,
    tie_rule: TieRule = lowest_index,
    incumbent: Optional[HistoryPolicy] = None,
) -> HistoryPolicy:
    """
    One application of the HR optimality operator: argmax over actions of the
    risk of the historical return at every decision node. An incumbent action
    that ties with the best is kept.
    """
    tree = evaluation.tree
    actions: Dict[HistoryKey, int] = {}
    for node in tree.decision_nodes():
        scores = [
            evaluate(beta, evaluation.historical(node.key, a)) for a in range(tree.mdp.n_actions)
        ]
        choice = tie_rule(scores)
        if incumbent is not None:
            current = incumbent.action(node.key)
            if scores[current] >= max(scores) - TIE_TOL:
                choice = current
        actions[node.key] = choice
    return HistoryPolicy(actions, multi_start=tree.mdp.multi_start)


@dataclass
class PolicyIterationResult:
    """Outcome of HR policy iteration."""

    policy: HistoryPolicy
    evaluation: HistoryEvaluation
    beta_table: Dict[Tuple[HistoryKey, int], float]
    root_betas: List[float]
    history_betas: List[Dict[HistoryKey, float]]
    iterations: int
    converged: bool

    @property
    def root_beta(self) -> float:
        return self.root_betas[-1]


def hr_policy_iteration(
    mdp: TabularMDP,
    beta: RiskMeasure,
    init: Optional[HistoryPolicy] = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    tie_rule: TieRule = lowest_index,
    max_nodes: int = DEFAULT_MAX_NODES,
    max_atoms: Optional[int] = None,
) -> PolicyIterationResult:
    """
    Alternate exact HR evaluation and greedy HR improvement until stable.

    Args:
        mdp: Environment
        beta: Risk measure scored on historical returns
        init: Starting policy (default: action 0 everywhere)
        max_iters: Evaluation budget
        tie_rule: Tie-breaking among equally good actions
        max_nodes: History tree budget
        max_atoms: Optional atom cap

    Returns:
        PolicyIterationResult with the root-beta sequence and, per iteration,
        beta[Z(h, pi(h))] at every decision history
    """
    tree = HistoryTree(mdp, max_nodes=max_nodes, max_atoms=max_atoms)
    policy = init or HistoryPolicy({}, multi_start=mdp.multi_start)
    policy = HistoryPolicy.from_policy(tree, policy)
    decision = tree.decision_nodes()

    root_betas: List[float] = []
    history_betas: List[Dict[HistoryKey, float]] = []
    converged = False
    iterations = 0
    evaluation = None
    for iterations in range(1, max_iters + 1):
        evaluation = hr_policy_eval(mdp, policy, tree=tree, max_atoms=max_atoms)
        root_betas.append(evaluate(beta, evaluation.root_distribution()))
        history_betas.append(
            {n.key: evaluate(beta, evaluation.historical(n.key, policy.action(n.key))) for n in decision}
        )
        improved = hr_greedy_improve(evaluation, beta, tie_rule, incumbent=policy)
        logger.debug(f"HR iteration {iterations}: root beta {root_betas[-1]:.9g}")
        if all(improved.action(n.key) == policy.action(n.key) for n in decision):
            converged = True
            break
        policy = improved

    beta_table = {k: evaluate(beta, evaluation.historical(*k)) for k in evaluation.suffix}
    return PolicyIterationResult(
        policy=policy,
        evaluation=evaluation,
        beta_table=beta_table,
        root_betas=root_betas,
        history_betas=history_betas,
        iterations=iterations,
        converged=converged,
    )


# --- trajectories and the global oracle ------------------------------------


def trajectory_return_dist(mdp: TabularMDP, policy: AnyPolicy) -> ReturnDistribution:
    """Exact distribution of the discounted trajectory return from the initial states."""
    parts = []
    for s0, p in mdp.initial:
        state = s0
        history: History = (s0,)
        dist = _ZERO
        discount = 1.0
        for _ in range(mdp.horizon):
            if mdp.is_terminal(state):
                break
            a = _checked(mdp, policy(history), history)
            dist = convolve(dist, affine(mdp.reward(state, a), discount, 0.0))
            discount *= mdp.gamma
            state = mdp.next_state(state, a)
            history = history + (a, state)
        parts.append((p, dist))
    return mix(parts)


def greedy_path(mdp: TabularMDP, policy: AnyPolicy, s0: Optional[int] = None) -> Tuple[int, ...]:
    """Action sequence the deterministic policy takes from s0 (default: first start)."""
    state = mdp.initial[0][0] if s0 is None else s0
    history: History = (state,)
    for _ in range(mdp.horizon):
        if mdp.is_terminal(state):
            break
        a = _checked(mdp, policy(history), history)
        state = mdp.next_state(state, a)
        history = history + (a, state)
    return tuple(history[1::2])


def policy_fingerprint(mdp: TabularMDP, policy: AnyPolicy) -> str:
    """Short digest of the on-path actions from every initial state."""
    paths = ";".join(
        f"{s0}:" + ",".join(map(str, greedy_path(mdp, policy, s0))) for s0 in mdp.initial_states
    )
    return hashlib.sha1(paths.encode("utf-8")).hexdigest()[:12]


def _enumerate_paths(
    mdp: TabularMDP, s0: int, limit: int
) -> List[Tuple[Tuple[int, ...], ReturnDistribution]]:
    paths: List[Tuple[Tuple[int, ...], ReturnDistribution]] = []

    def walk(state: int, depth: int, actions: Tuple[int, ...], dist: ReturnDistribution, discount):
        if depth == mdp.horizon or mdp.is_terminal(state):
            paths.append((actions, dist))
            if len(paths) > limit:
                raise BudgetExceededError(
                    format_error("policy_budget", size=len(paths), limit=limit),
                    size=len(paths),
                    limit=limit,
                )
            return
        for a in range(mdp.n_actions):
            step = affine(mdp.reward(state, a), discount, 0.0)
            walk(
                mdp.next_state(state, a),
                depth + 1,
                actions + (a,),
                convolve(dist, step),
                discount * mdp.gamma,
            )

    walk(s0, 0, (), _ZERO, 1.0)
    return paths


def brute_force_optimal(
    mdp: TabularMDP, beta: RiskMeasure, max_policies: int = DEFAULT_MAX_POLICIES
) -> Tuple[HistoryPolicy, float]:
    """
    Global optimum over deterministic history policies.

    With deterministic dynamics a policy's trajectory law depends only on the
    action sequence it plays from each start, so the search runs over
    combinations of per-start paths. The first maximizer in enumeration order
    wins.

    Raises:
        BudgetExceededError: if the number of candidates exceeds max_policies
    """
    per_root = [_enumerate_paths(mdp, s0, max_policies) for s0 in mdp.initial_states]
    total = int(np.prod([len(paths) for paths in per_root], dtype=float))
    if total > max_policies:
        raise BudgetExceededError(
            format_error("policy_budget", size=total, limit=max_policies),
            size=total,
            limit=max_policies,
        )
    weights = [p for _, p in mdp.initial]
    best_value, best_combo = -np.inf, None
    for combo in itertools.product(*per_root):
        dist = mix([(w, d) for w, (_, d) in zip(weights, combo)])
        value = evaluate(beta, dist)
        if value > best_value:
            best_value, best_combo = value, combo

    actions: Dict[HistoryKey, int] = {}
    for s0, (path, _) in zip(mdp.initial_states, best_combo):
        root = (s0,) if mdp.multi_start else ()
        for t, a in enumerate(path):
            actions[root + path[:t]] = a
    logger.debug(f"Brute force searched {total} candidates; best beta {best_value:.9g}")
    return HistoryPolicy(actions, multi_start=mdp.multi_start), float(best_value)


# --- Markovian operators ---------------------------------------------------


def _all_keys(mdp: TabularMDP) -> List[Tuple[int, int]]:
    return [(s, a) for s in range(mdp.n_states) for a in range(mdp.n_actions)]


def _capped(d: ReturnDistribution, max_atoms: Optional[int]) -> Tuple[ReturnDistribution, float]:
    if max_atoms is None:
        return d, 0.0
    return prune(d, max_atoms)


@dataclass
class MarkovEvaluation:
    """Exact Z^pi on (state, action) keys."""

    values: KeyedDistributionMap
    prune_error: float = 0.0

    def __getitem__(self, key: Tuple[int, int]) -> ReturnDistribution:
        return self.values[key]


def markov_policy_eval(
    mdp: TabularMDP, policy: MarkovPolicy, max_atoms: Optional[int] = None
) -> MarkovEvaluation:
    """Backward induction over the remaining-steps index up to the horizon."""
    previous = {k: _ZERO for k in _all_keys(mdp)}
    error = 0.0
    for _ in range(mdp.horizon):
        current = {}
        for s, a in _all_keys(mdp):
            if mdp.is_terminal(s):
                current[(s, a)] = _ZERO
                continue
            s_next = mdp.next_state(s, a)
            cont = _ZERO if mdp.is_terminal(s_next) else previous[(s_next, policy.action(s_next))]
            dist, err = _capped(convolve(mdp.reward(s, a), affine(cont, mdp.gamma, 0.0)), max_atoms)
            error += err
            current[(s, a)] = dist
        previous = current
    return MarkovEvaluation(previous, prune_error=error)


def _require_keys(mdp: TabularMDP, Z: KeyedDistributionMap):
    for key in _all_keys(mdp):
        if key not in Z:
            raise DistributionError(format_error("missing_key", key=key))


def greedy_markov_policy(
    mdp: TabularMDP,
    Z: KeyedDistributionMap,
    score: Callable[[ReturnDistribution], float],
    tie_rule: TieRule = lowest_index,
) -> MarkovPolicy:
    actions = []
    for s in range(mdp.n_states):
        if mdp.is_terminal(s):
            actions.append(0)
        else:
            actions.append(tie_rule([score(Z[(s, a)]) for a in range(mdp.n_actions)]))
    return MarkovPolicy(tuple(actions))


def _markov_backup(
    mdp: TabularMDP,
    Z: KeyedDistributionMap,
    score: Callable[[ReturnDistribution], float],
    tie_rule: TieRule,
    max_atoms: Optional[int],
) -> Tuple[KeyedDistributionMap, float]:
    _require_keys(mdp, Z)
    greedy: Dict[int, int] = {}
    out: KeyedDistributionMap = {}
    error = 0.0
    for s, a in _all_keys(mdp):
        if mdp.is_terminal(s):
            out[(s, a)] = _ZERO
            continue
        s_next = mdp.next_state(s, a)
        if mdp.is_terminal(s_next):
            out[(s, a)] = mdp.reward(s, a)
            continue
        if s_next not in greedy:
            greedy[s_next] = tie_rule([score(Z[(s_next, b)]) for b in range(mdp.n_actions)])
        cont = Z[(s_next, greedy[s_next])]
        out[(s, a)], err = _capped(
            convolve(mdp.reward(s, a), affine(cont, mdp.gamma, 0.0)), max_atoms
        )
        error += err
    return out, error


def risk_bellman_step(
    mdp: TabularMDP,
    Z: KeyedDistributionMap,
    beta: RiskMeasure,
    tie_rule: TieRule = lowest_index,
    max_atoms: Optional[int] = None,
) -> KeyedDistributionMap:
    """
    One synchronous application of the risk-sensitive Markov optimality operator.

    The continuation at s' follows argmax_a beta[Z(s', a)], computed once per
    successor state per application.
    """
    out, _ = _markov_backup(mdp, Z, lambda d: evaluate(beta, d), tie_rule, max_atoms)
    return out


@dataclass
class MarkovIterationResult:
    """Outcome of repeated Markov operator sweeps."""

    values: KeyedDistributionMap
    policy: MarkovPolicy
    deltas: List[float]
    mean_history: List[np.ndarray]
    converged: bool
    sweeps: int
    oscillating: bool = False
    prune_error: float = 0.0


def _mean_table(mdp: TabularMDP, Z: KeyedDistributionMap) -> np.ndarray:
    table = np.zeros((mdp.n_states, mdp.n_actions))
    for (s, a), d in Z.items():
        table[s, a] = d.mean
    return table


def _signature(Z: KeyedDistributionMap) -> Tuple:
    return tuple(
        (k, tuple(np.round(Z[k].values, 9)), tuple(np.round(Z[k].probs, 12))) for k in sorted(Z)
    )


def _iterate(
    mdp: TabularMDP,
    score: Callable[[ReturnDistribution], float],
    sweeps: int,
    init: Optional[KeyedDistributionMap],
    tie_rule: TieRule,
    max_atoms: Optional[int],
    detect_cycles: bool,
) -> MarkovIterationResult:
    Z = dict(init) if init is not None else {k: _ZERO for k in _all_keys(mdp)}
    means = [_mean_table(mdp, Z)]
    deltas: List[float] = []
    seen = {_signature(Z): 0} if detect_cycles else {}
    converged = oscillating = False
    error = 0.0
    done = 0
    for done in range(1, sweeps + 1):
        new, err = _markov_backup(mdp, Z, score, tie_rule, max_atoms)
        error += err
        means.append(_mean_table(mdp, new))
        deltas.append(float(np.max(np.abs(means[-1] - means[-2]), initial=0.0)))
        unchanged = all(new[k].allclose(Z[k]) for k in new)
        Z = new
        if unchanged:
            converged = True
            break
        if detect_cycles:
            sig = _signature(Z)
            if sig in seen:
                oscillating = True
                logger.warning(
                    f"Operator iterates on {mdp.name} cycle with period {done - seen[sig]}"
                )
                break
            seen[sig] = done
    policy = greedy_markov_policy(mdp, Z, score, lowest_index)
    return MarkovIterationResult(
        values=Z,
        policy=policy,
        deltas=deltas,
        mean_history=means,
        converged=converged,
        sweeps=done,
        oscillating=oscillating,
        prune_error=error,
    )


def mean_value_iteration(
    mdp: TabularMDP,
    sweeps: int = DEFAULT_SWEEPS,
    init: Optional[KeyedDistributionMap] = None,
    max_atoms: Optional[int] = None,
) -> MarkovIterationResult:
    """
    Distributional value iteration with mean-greedy continuations.

    Stops early once a sweep leaves every distribution unchanged. The result
    carries the per-sweep L-infinity change of the mean table.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    return _iterate(mdp, lambda d: d.mean, sweeps, init, lowest_index, max_atoms, False)


def risk_bellman_iteration(
    mdp: TabularMDP,
    beta: RiskMeasure,
    sweeps: int = DEFAULT_SWEEPS,
    init: Optional[KeyedDistributionMap] = None,
    tie_rule: TieRule = lowest_index,
    max_atoms: Optional[int] = None,
) -> MarkovIterationResult:
    """Repeated risk-sensitive Markov sweeps with fixed-point and cycle detection."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    score = lambda d: evaluate(beta, d)  # noqa: E731
    return _iterate(mdp, score, sweeps, init, tie_rule, max_atoms, True)


# --- probes ----------------------------------------------------------------


@dataclass
class ProbeResult:
    """Both sides of an operator inequality; unpacks as (lhs, rhs)."""

    lhs: float
    rhs: float
    images: Tuple[KeyedDistributionMap, KeyedDistributionMap] = ({}, {})
    depth_lhs: Dict[int, float] = field(default_factory=dict)
    depth_bounds: Dict[int, float] = field(default_factory=dict)

    def __iter__(self) -> Iterator[float]:
        yield self.lhs
        yield self.rhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-9


def hr_apply(tree: HistoryTree, policy: AnyPolicy, S: KeyedDistributionMap) -> KeyedDistributionMap:
    """One application of the HR evaluation operator to a suffix map."""
    return {
        (node.key, a): _hr_backup(tree, policy, S, node, a)
        for node in tree.decision_nodes()
        for a in range(tree.mdp.n_actions)
    }


def contraction_probe(
    mdp: TabularMDP,
    policy: AnyPolicy,
    S1: KeyedDistributionMap,
    S2: KeyedDistributionMap,
    p: float = 1.0,
    tree: Optional[HistoryTree] = None,
) -> ProbeResult:
    """
    Compare d_p(T S1, T S2) against gamma * d_p(S1, S2) for the HR operator.

    Also reports, per depth t, the largest distance between the historical
    views of the images, which is bounded by gamma^(t+1) * d_p(S1, S2).
    """
    tree = tree or HistoryTree(mdp)
    T1 = hr_apply(tree, policy, S1)
    T2 = hr_apply(tree, policy, S2)
    before = max_wasserstein(S1, S2, p)
    result = ProbeResult(max_wasserstein(T1, T2, p), mdp.gamma * before, (T1, T2))
    for key, a in T1:
        depth = tree.nodes[key].depth
        dist = wasserstein(tree.historical(key, T1[(key, a)]), tree.historical(key, T2[(key, a)]), p)
        result.depth_lhs[depth] = max(result.depth_lhs.get(depth, 0.0), dist)
        result.depth_bounds[depth] = mdp.gamma ** (depth + 1) * before
    return result


def hr_optimality_apply(
    tree: HistoryTree,
    S: KeyedDistributionMap,
    beta: RiskMeasure,
    tie_rule: TieRule = lowest_index,
) -> KeyedDistributionMap:
    """One application of the HR optimality operator to a suffix map."""
    mdp = tree.mdp
    greedy: Dict[HistoryKey, int] = {}
    for node in tree.decision_nodes():
        scores = [evaluate(beta, tree.historical(node.key, S[(node.key, a)])) for a in range(mdp.n_actions)]
        greedy[node.key] = tie_rule(scores)
    policy = HistoryPolicy(greedy, multi_start=mdp.multi_start)
    return hr_apply(tree, policy, S)


def _beta_gap(
    beta: RiskMeasure, m1: KeyedDistributionMap, m2: KeyedDistributionMap, view
) -> float:
    if m1.keys() != m2.keys():
        raise DistributionError(format_error("key_mismatch", detail="probe inputs"))
    if not m1:
        return 0.0
    return max(abs(evaluate(beta, view(k, m1[k])) - evaluate(beta, view(k, m2[k]))) for k in m1)


def nonexpansion_probe(
    mdp: TabularMDP,
    Z1: KeyedDistributionMap,
    Z2: KeyedDistributionMap,
    beta: RiskMeasure,
    operator: str = "hr",
    tie_rule: TieRule = lowest_index,
    tree: Optional[HistoryTree] = None,
) -> ProbeResult:
    """
    Compare max |beta[T Z1] - beta[T Z2]| against max |beta[Z1] - beta[Z2]|.

    With operator="hr" the inputs are suffix maps over the history tree and
    beta is scored on historical views. With operator="markov" the inputs are
    (state, action) maps and T is the risk-sensitive Markov operator; the
    same tie_rule instance serves both applications, Z1 first.
    """
    if operator == "hr":
        tree = tree or HistoryTree(mdp)
        view = lambda k, d: tree.historical(k[0], d)  # noqa: E731
        T1 = hr_optimality_apply(tree, Z1, beta, tie_rule)
        T2 = hr_optimality_apply(tree, Z2, beta, tie_rule)
    elif operator == "markov":
        view = lambda k, d: d  # noqa: E731
        T1 = risk_bellman_step(mdp, Z1, beta, tie_rule)
        T2 = risk_bellman_step(mdp, Z2, beta, tie_rule)
    else:
        raise ValueError(f"Unknown operator {operator!r}")
    return ProbeResult(_beta_gap(beta, T1, T2, view), _beta_gap(beta, Z1, Z2, view), (T1, T2))
