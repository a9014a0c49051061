"""
TQL Lab - Experiment Runner

Orchestrates the counterexample report, the exact dynamic-programming
comparison, single training runs and multi-seed sweeps, and writes their
CSV outputs. Every CSV carries the config hash of the run that produced it.
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import psutil

from .agents import EvalRow, train
from .config_manager import ExperimentConfig
from .constants import (
    CONFIG_SNAPSHOT_FILE,
    COUNTEREXAMPLE_MEASURE,
    COUNTEREXAMPLE_TOL,
    CSV_FLOAT_FORMAT,
    DEFAULT_MAX_ATOMS,
    ERROR_MESSAGES,
    EXACT_SUMMARY_FILE,
    EXPECTED_BETA_BELLMAN,
    EXPECTED_BETA_OPTIMAL,
    EXPECTED_TIE_GAP,
    HISTOGRAM_FILE,
    LEARNING_CURVE_FILE,
    LOG_DATE_FORMAT,
    LOG_FORMAT,
    POLICY_LOG_FILE,
    RUN_LOG_FILE,
    SUCCESS_MESSAGES,
    SWEEP_FILE,
)
from .distributions import ReturnDistribution
from .envs import TabularMDP, three_state_mdp, tie_counterexample_mdp
from .errors import BudgetExceededError, TQLLabError
from .operators import (
    AlternatingTieRule,
    MarkovPolicy,
    brute_force_optimal,
    hr_policy_iteration,
    make_tie_rule,
    markov_policy_eval,
    mean_value_iteration,
    nonexpansion_probe,
    policy_fingerprint,
    risk_bellman_iteration,
    risk_bellman_step,
    trajectory_return_dist,
)
from .risk import RiskMeasure, evaluate, parse_measure

logger = logging.getLogger(__name__)

_KEYS = ((0, 0), (0, 1), (1, 0), (1, 1))


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Header row, fixed column order, 9 significant digits, LF line endings."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {path}")
    return path


def format_distribution(d: ReturnDistribution) -> str:
    return "{" + ", ".join(f"{v:g}: {p:.4g}" for v, p in d.atoms) + "}"


# --- counterexample --------------------------------------------------------


@dataclass
class CounterexampleReport:
    """Tables for the three-state MDP and its tied-action variant."""

    measure: RiskMeasure
    columns: Tuple[str, ...]
    table: List[Tuple[str, List[str]]]
    tie_table: List[Tuple[str, List[str]]]
    beta_optimal: Tuple[float, ...]
    beta_bellman: Tuple[float, ...]
    hr_root_beta: float
    markov_root_beta: float
    tie_lhs: float
    tie_rhs: float
    checked: bool
    mismatches: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    @property
    def tie_gap(self) -> float:
        return self.tie_lhs - self.tie_rhs

    def render(self) -> str:
        lines = []
        for title, rows in (("Three-state MDP", self.table), ("Tied-action variant", self.tie_table)):
            lines.append(f"{title} ({self.measure})")
            widths = [max(len(c), *(len(r[1][i]) for r in rows)) for i, c in enumerate(self.columns)]
            label_w = max(len(r[0]) for r in rows)
            lines.append(
                " " * label_w + " | " + " | ".join(c.ljust(w) for c, w in zip(self.columns, widths))
            )
            for label, cells in rows:
                lines.append(
                    label.ljust(label_w) + " | " + " | ".join(c.ljust(w) for c, w in zip(cells, widths))
                )
            lines.append("")
        lines.append(f"HR optimum trajectory {self.measure}: {self.hr_root_beta:g}")
        lines.append(f"Markov risk-greedy trajectory {self.measure}: {self.markov_root_beta:g}")
        lines.append(f"Contraction gap on the tied variant: {self.tie_lhs:g} > {self.tie_rhs:g}")
        return "\n".join(lines)


def _betas(beta: RiskMeasure, Z) -> Tuple[float, ...]:
    return tuple(evaluate(beta, Z[k]) for k in _KEYS)


def _dists(Z) -> List[str]:
    return [format_distribution(Z[k]) for k in _KEYS]


def _nums(values: Sequence[float]) -> List[str]:
    return [f"{v:g}" for v in values]


def build_counterexample_report(measure: Optional[RiskMeasure] = None) -> CounterexampleReport:
    """
    Compute every table entry exactly; no randomness and no files.

    The expected values are checked only for the default CVaR(0.1) measure;
    any other measure produces a report without a pass/fail verdict.
    """
    beta = measure or parse_measure(COUNTEREXAMPLE_MEASURE)
    mdp = three_state_mdp()
    labels = tuple(f"{mdp.state_labels[s]},{mdp.action_labels[a]}" for s, a in _KEYS)

    rewards = {(s, a): mdp.reward(s, a) for s, a in _KEYS}
    z_star = markov_policy_eval(mdp, MarkovPolicy((0, 0, 0)))
    z_init = markov_policy_eval(mdp, MarkovPolicy((0, 1, 0)))
    z_next = risk_bellman_step(mdp, z_init.values, beta)
    beta_optimal = _betas(beta, z_star)
    beta_bellman = _betas(beta, z_next)

    hr = hr_policy_iteration(mdp, beta)
    hr_root = evaluate(beta, trajectory_return_dist(mdp, hr.policy))
    markov = risk_bellman_iteration(mdp, beta)
    markov_root = evaluate(beta, trajectory_return_dist(mdp, markov.policy))

    tie_mdp = tie_counterexample_mdp()
    z_tie = markov_policy_eval(tie_mdp, MarkovPolicy((0, 0, 0))).values
    probe = nonexpansion_probe(tie_mdp, z_tie, z_tie, beta, operator="markov", tie_rule=AlternatingTieRule())
    first, second = probe.images

    table = [
        ("R", _dists(rewards)),
        ("Z*", _dists(z_star)),
        ("beta(Z*)", _nums(beta_optimal)),
        ("Z", _dists(z_init)),
        ("beta(Z)", _nums(_betas(beta, z_init))),
        ("T*Z", _dists(z_next)),
        ("beta(T*Z)", _nums(beta_bellman)),
    ]
    tie_table = [
        ("R", _dists({k: tie_mdp.reward(*k) for k in _KEYS})),
        ("beta(Z1) = beta(Z2)", _nums(_betas(beta, z_tie))),
        ("T*Z1", _dists(first)),
        ("beta(T*Z1)", _nums(_betas(beta, first))),
        ("T*Z2", _dists(second)),
        ("beta(T*Z2)", _nums(_betas(beta, second))),
    ]

    checked = str(beta) == COUNTEREXAMPLE_MEASURE
    report = CounterexampleReport(
        measure=beta,
        columns=labels,
        table=table,
        tie_table=tie_table,
        beta_optimal=beta_optimal,
        beta_bellman=beta_bellman,
        hr_root_beta=hr_root,
        markov_root_beta=markov_root,
        tie_lhs=probe.lhs,
        tie_rhs=probe.rhs,
        checked=checked,
    )
    if checked:
        for name, got, expected in (
            ("beta(Z*)", beta_optimal, EXPECTED_BETA_OPTIMAL),
            ("beta(T*Z)", beta_bellman, EXPECTED_BETA_BELLMAN),
        ):
            for label, g, e in zip(labels, got, expected):
                if abs(g - e) > COUNTEREXAMPLE_TOL:
                    report.mismatches.append(f"{name}[{label}]: expected {e:g}, got {g:.12g}")
        if abs(probe.lhs - EXPECTED_TIE_GAP) > COUNTEREXAMPLE_TOL or probe.rhs > COUNTEREXAMPLE_TOL:
            report.mismatches.append(
                f"tie construction: expected gap {EXPECTED_TIE_GAP:g} from 0, "
                f"got {probe.lhs:.12g} from {probe.rhs:.12g}"
            )
        if abs(hr_root - EXPECTED_BETA_OPTIMAL[0]) > COUNTEREXAMPLE_TOL:
            report.mismatches.append(
                f"HR optimum: expected {EXPECTED_BETA_OPTIMAL[0]:g}, got {hr_root:.12g}"
            )
    return report


# --- exact comparison ------------------------------------------------------


@dataclass
class ExactRow:
    method: str
    root_beta: Optional[float]
    policy_fingerprint: str
    converged: Optional[bool]
    sweeps: Optional[int]
    status: str


def run_exact_methods(
    mdp: TabularMDP, beta: RiskMeasure, config: ExperimentConfig
) -> List[ExactRow]:
    """Run every exact method; budget failures become rows with a status."""
    max_atoms = config["exact.max_atoms"]
    markov_atoms = max_atoms or DEFAULT_MAX_ATOMS
    rows: List[ExactRow] = []

    def traj_beta(policy) -> float:
        return evaluate(beta, trajectory_return_dist(mdp, policy))

    try:
        result = hr_policy_iteration(
            mdp,
            beta,
            max_iters=config["exact.max_iters"],
            tie_rule=make_tie_rule(config["exact.tie_rule"]),
            max_nodes=config["exact.max_nodes"],
            max_atoms=max_atoms,
        )
        rows.append(
            ExactRow(
                "hr_policy_iteration",
                traj_beta(result.policy),
                policy_fingerprint(mdp, result.policy),
                result.converged,
                result.iterations,
                "ok" if result.converged else "not_converged",
            )
        )
    except BudgetExceededError as e:
        logger.error(f"hr_policy_iteration skipped: {e}")
        rows.append(ExactRow("hr_policy_iteration", None, "", None, None, "budget_exceeded"))

    try:
        policy, value = brute_force_optimal(mdp, beta, config["exact.max_policies"])
        rows.append(
            ExactRow("brute_force_optimal", value, policy_fingerprint(mdp, policy), True, None, "ok")
        )
    except BudgetExceededError as e:
        logger.error(f"brute_force_optimal skipped: {e}")
        rows.append(ExactRow("brute_force_optimal", None, "", None, None, "budget_exceeded"))

    mean_result = mean_value_iteration(mdp, sweeps=config["exact.sweeps"], max_atoms=markov_atoms)
    rows.append(
        ExactRow(
            "mean_value_iteration",
            traj_beta(mean_result.policy),
            policy_fingerprint(mdp, mean_result.policy),
            mean_result.converged,
            mean_result.sweeps,
            "ok" if mean_result.converged else "not_converged",
        )
    )

    risk_result = risk_bellman_iteration(
        mdp,
        beta,
        sweeps=config["exact.sweeps"],
        tie_rule=make_tie_rule(config["exact.tie_rule"]),
        max_atoms=markov_atoms,
    )
    if risk_result.oscillating:
        status = "oscillating"
    else:
        status = "ok" if risk_result.converged else "not_converged"
    rows.append(
        ExactRow(
            "risk_bellman_iteration",
            traj_beta(risk_result.policy),
            policy_fingerprint(mdp, risk_result.policy),
            risk_result.converged,
            risk_result.sweeps,
            status,
        )
    )
    return rows


# --- training runs ---------------------------------------------------------


@dataclass
class RunRecord:
    """Outputs of one training run."""

    run_id: str
    seed: int
    config_hash: str
    rows: List[EvalRow]
    learning_curve: pd.DataFrame
    histogram: pd.DataFrame
    policy_log: pd.DataFrame
    run_dir: Path


def run_id_for(config: ExperimentConfig) -> str:
    return f"{config.agent_kind}-{config.env_name}-s{config.seed}"


@contextmanager
def _run_log(path: Path) -> Iterator[None]:
    """Mirror log records into the run directory while the run lasts."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATE_FORMAT))
    root = logging.getLogger()
    previous_level = root.level
    # spawned sweep workers start with the WARNING default
    if root.getEffectiveLevel() > logging.INFO:
        root.setLevel(logging.INFO)
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        root.setLevel(previous_level)
        handler.close()


def _learning_frame(run_id: str, config: ExperimentConfig, rows: Sequence[EvalRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "run_id": run_id,
            "seed": config.seed,
            "step": [r.step for r in rows],
            "measure_name": str(config.measure),
            "measure_value": [r.measure_value for r in rows],
            "mean_return": [r.mean_return for r in rows],
            "config_hash": config.config_hash,
        },
        columns=[
            "run_id",
            "seed",
            "step",
            "measure_name",
            "measure_value",
            "mean_return",
            "config_hash",
        ],
    )


def _histogram_frame(run_id: str, config: ExperimentConfig, returns: np.ndarray) -> pd.DataFrame:
    values, counts = np.unique(np.round(returns, 9), return_counts=True)
    return pd.DataFrame(
        {
            "run_id": run_id,
            "return_value": values,
            "count": counts,
            "config_hash": config.config_hash,
        },
        columns=["run_id", "return_value", "count", "config_hash"],
    )


def _policy_frame(mdp: TabularMDP, config: ExperimentConfig, rows: Sequence[EvalRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "step": [r.step for r in rows],
            "actions": [";".join(mdp.action_labels[a] for a in r.actions) for r in rows],
            "config_hash": config.config_hash,
        },
        columns=["step", "actions", "config_hash"],
    )


def train_run(config: ExperimentConfig) -> RunRecord:
    """
    One seeded training run with all of its output files.

    Training and evaluation draw from separate streams seeded by config.seed,
    so a repeated seed reproduces identical CSVs.
    """
    run_id = run_id_for(config)
    run_dir = config.output_dir / run_id
    with _run_log(run_dir / RUN_LOG_FILE):
        mdp = config.build_env()
        beta = config.measure
        logger.info(f"Starting {run_id} on {mdp!r} with {beta} ({config.config_hash})")
        log = train(
            config.agent_kind,
            mdp,
            beta,
            config.agent_config,
            rng=np.random.default_rng(config.seed),
            total_steps=config["train.total_steps"],
            eval_every=config["train.eval_every"],
            eval_episodes=config["train.eval_episodes"],
            eval_rng=np.random.default_rng([config.seed, 1]),
        )
        record = RunRecord(
            run_id=run_id,
            seed=config.seed,
            config_hash=config.config_hash,
            rows=log.rows,
            learning_curve=_learning_frame(run_id, config, log.rows),
            histogram=_histogram_frame(run_id, config, log.final_returns),
            policy_log=_policy_frame(mdp, config, log.rows),
            run_dir=run_dir,
        )
        write_csv(record.learning_curve, run_dir / LEARNING_CURVE_FILE)
        write_csv(record.histogram, run_dir / HISTOGRAM_FILE)
        write_csv(record.policy_log, run_dir / POLICY_LOG_FILE)
        (run_dir / CONFIG_SNAPSHOT_FILE).write_text(config.to_text(), encoding="utf-8")
        log.agent.save(run_dir)
        logger.info(f"Finished {run_id}: final {beta} = {log.final.measure_value:.4f}")
    return record


def aggregate_sweep(records: Sequence[RunRecord], config_hash: str) -> pd.DataFrame:
    """Per-step mean, min and max of measure_value across runs."""
    curves = pd.concat([r.learning_curve for r in records], ignore_index=True)
    grouped = curves.groupby("step", sort=True)["measure_value"]
    frame = pd.DataFrame(
        {
            "n_seeds": grouped.count(),
            "measure_mean": grouped.mean(),
            "measure_min": grouped.min(),
            "measure_max": grouped.max(),
        }
    ).reset_index()
    frame["config_hash"] = config_hash
    return frame[["step", "n_seeds", "measure_mean", "measure_min", "measure_max", "config_hash"]]


def _worker_count(n_runs: int, max_workers: Optional[int]) -> int:
    if max_workers:
        return max(1, min(n_runs, max_workers))
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    return max(1, min(n_runs, cores))


def run_sweep(
    config: ExperimentConfig,
    seeds: Sequence[int],
    parallel: bool = True,
    max_workers: Optional[int] = None,
) -> Tuple[pd.DataFrame, List[RunRecord], Dict[int, str]]:
    """
    Train one isolated run per seed and aggregate their learning curves.

    Returns:
        Tuple of (sweep frame, successful records in seed order, failures by seed)
    """
    if not seeds:
        raise ValueError(ERROR_MESSAGES["no_seeds"])
    configs = [config.with_seed(s) for s in seeds]
    records: Dict[int, RunRecord] = {}
    failures: Dict[int, str] = {}

    workers = _worker_count(len(configs), max_workers) if parallel else 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(train_run, c): c.seed for c in configs}
            for future in as_completed(futures):
                seed = futures[future]
                try:
                    records[seed] = future.result()
                    logger.info(f"Sweep: seed {seed} done ({len(records)}/{len(configs)})")
                except Exception as e:
                    failures[seed] = str(e)
                    logger.warning(f"Sweep: seed {seed} failed: {e}")
    else:
        for c in configs:
            try:
                records[c.seed] = train_run(c)
            except Exception as e:
                failures[c.seed] = str(e)
                logger.warning(f"Sweep: seed {c.seed} failed: {e}")

    ordered = [records[s] for s in seeds if s in records]
    frame = aggregate_sweep(ordered, config.config_hash) if ordered else pd.DataFrame()
    return frame, ordered, failures


class ExperimentRunner:
    """Runs configured experiments and reports (success, message) tuples."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)

    def exact_dir(self) -> Path:
        return self.config.output_dir / f"exact-{self.config.env_name}-{self.config.config_hash}"

    def run_exact(self) -> Tuple[bool, str]:
        """
        Compare the exact methods on the configured environment.

        Returns:
            Tuple[bool, str]: (success, message)
        """
        try:
            mdp = self.config.build_env()
            beta = self.config.measure
            rows = run_exact_methods(mdp, beta, self.config)
        except (TQLLabError, OSError) as e:
            self.logger.error(f"Exact comparison failed: {e}")
            return False, str(e)

        frame = pd.DataFrame(
            [vars(r) for r in rows],
            columns=["method", "root_beta", "policy_fingerprint", "converged", "sweeps", "status"],
        )
        frame["sweeps"] = frame["sweeps"].astype("Int64")
        frame["config_hash"] = self.config.config_hash
        for row in rows:
            value = "-" if row.root_beta is None else f"{row.root_beta:.9g}"
            self.logger.info(f"{row.method}: {beta} = {value} [{row.status}]")
        path = write_csv(frame, self.exact_dir() / EXACT_SUMMARY_FILE)
        (self.exact_dir() / CONFIG_SNAPSHOT_FILE).write_text(self.config.to_text(), encoding="utf-8")
        return True, SUCCESS_MESSAGES["exact"].format(path=path)

    def run_train(self) -> Tuple[bool, str]:
        """
        Train the configured agent once.

        Returns:
            Tuple[bool, str]: (success, message)
        """
        try:
            record = train_run(self.config)
        except (TQLLabError, OSError) as e:
            self.logger.error(f"Training failed: {e}")
            return False, str(e)
        return True, SUCCESS_MESSAGES["train"].format(run_id=record.run_id, path=record.run_dir)

    def run_sweep(
        self, seeds: Sequence[int], parallel: bool = True, max_workers: Optional[int] = None
    ) -> Tuple[bool, str]:
        """
        Train one run per seed and write the aggregate curve.

        Returns:
            Tuple[bool, str]: (success, message); success requires every seed to finish
        """
        try:
            frame, records, failures = run_sweep(self.config, seeds, parallel, max_workers)
        except (TQLLabError, ValueError, OSError) as e:
            self.logger.error(f"Sweep failed: {e}")
            return False, str(e)
        if not records:
            return False, "All sweep runs failed: " + "; ".join(
                f"seed {s}: {msg}" for s, msg in sorted(failures.items())
            )
        out_dir = self.config.output_dir / (
            f"sweep-{self.config.agent_kind}-{self.config.env_name}-{self.config.config_hash}"
        )
        path = write_csv(frame, out_dir / SWEEP_FILE)
        message = SUCCESS_MESSAGES["sweep"].format(n=len(records), path=path)
        if failures:
            failed = ", ".join(str(s) for s in sorted(failures))
            return False, f"{message} (failed seeds: {failed})"
        return True, message
