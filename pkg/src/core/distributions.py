"""
TQL Lab - Return Distributions

Finite Dirac mixtures over real-valued returns, their algebra (affine maps,
independent sums, mixtures), quantile and CDF queries, and exact
Wasserstein distances.

Every ReturnDistribution is stored in canonical form: values sorted
ascending, values closer than ATOM_MERGE_TOL merged, probabilities strictly
positive and summing to one.
"""

import logging
from typing import Dict, Hashable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import ATOM_MERGE_TOL, DEFAULT_MAX_ATOMS, PROB_SUM_TOL, QUANTILE_TOL
from .errors import DistributionError, format_error

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


def _canonicalize(values: ArrayLike, probs: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    values = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
    probs = np.atleast_1d(np.asarray(probs, dtype=float)).ravel()
    if values.shape != probs.shape:
        raise DistributionError("values and probs must have the same length")
    if not np.all(np.isfinite(values)):
        bad = values[~np.isfinite(values)][0]
        raise DistributionError(format_error("non_finite", value=float(bad)))
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise DistributionError(format_error("negative_prob"))

    keep = probs > 0
    values, probs = values[keep], probs[keep]
    total = probs.sum()
    if values.size == 0 or total <= 0:
        raise DistributionError(format_error("zero_mass"))

    order = np.argsort(values, kind="mergesort")
    values, probs = values[order], probs[order]

    # chain-merge neighbours closer than the tolerance; keeps the group's smallest value
    starts = np.flatnonzero(np.concatenate(([True], np.diff(values) > ATOM_MERGE_TOL)))
    values = values[starts]
    probs = np.add.reduceat(probs, starts) / total
    return values, probs


class ReturnDistribution:
    """Immutable finite Dirac mixture in canonical form."""

    __slots__ = ("_values", "_probs", "_cumulative")

    def __init__(self, values: ArrayLike, probs: Optional[ArrayLike] = None):
        """
        Build a canonical distribution.

        Args:
            values: Atom locations
            probs: Non-negative atom weights (uniform when omitted); renormalized
        """
        values_arr = np.atleast_1d(np.asarray(values, dtype=float))
        if probs is None:
            probs = np.ones_like(values_arr)
        vals, prob = _canonicalize(values_arr, probs)
        cumulative = np.cumsum(prob)
        cumulative[-1] = 1.0
        for arr in (vals, prob, cumulative):
            arr.setflags(write=False)
        self._values = vals
        self._probs = prob
        self._cumulative = cumulative

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def cumulative(self) -> np.ndarray:
        """Cumulative probabilities at each atom; the last entry is exactly 1."""
        return self._cumulative

    @property
    def atoms(self) -> Tuple[Tuple[float, float], ...]:
        return tuple(zip(self._values.tolist(), self._probs.tolist()))

    @property
    def mean(self) -> float:
        return float(np.dot(self._values, self._probs))

    @property
    def support_range(self) -> float:
        return float(self._values[-1] - self._values[0])

    def __len__(self) -> int:
        return int(self._values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReturnDistribution):
            return NotImplemented
        return np.array_equal(self._values, other._values) and np.array_equal(
            self._probs, other._probs
        )

    def __hash__(self) -> int:
        return hash((self._values.tobytes(), self._probs.tobytes()))

    def allclose(self, other: "ReturnDistribution", atol: float = 1e-12) -> bool:
        """Same atom count with values and probabilities equal within atol."""
        return (
            len(self) == len(other)
            and np.allclose(self._values, other._values, rtol=0.0, atol=atol)
            and np.allclose(self._probs, other._probs, rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        body = ", ".join(f"({v:.6g}, {p:.6g})" for v, p in self.atoms)
        return f"ReturnDistribution({{{body}}})"


# Map from an opaque key ((state, action) or (history, action)) to a distribution.
KeyedDistributionMap = Dict[Hashable, ReturnDistribution]


def dirac(value: float) -> ReturnDistribution:
    """Point mass at `value`."""
    if not np.isfinite(value):
        raise DistributionError(format_error("non_finite", value=value))
    return ReturnDistribution([value], [1.0])


def normalize(atoms: Iterable[Tuple[float, float]]) -> ReturnDistribution:
    """Sort, merge and renormalize a raw list of (value, probability) atoms."""
    atoms = list(atoms)
    if not atoms:
        raise DistributionError(format_error("zero_mass"))
    values, probs = zip(*atoms)
    return ReturnDistribution(values, probs)


def affine(d: ReturnDistribution, scale: float, shift: float) -> ReturnDistribution:
    """Distribution of scale * X + shift; scale 0 collapses to dirac(shift)."""
    if scale < 0:
        raise DistributionError(format_error("negative_scale", scale=scale))
    if not np.isfinite(shift) or not np.isfinite(scale):
        raise DistributionError(format_error("non_finite", value=shift))
    if scale == 0:
        return dirac(shift)
    if scale == 1 and shift == 0:
        return d
    return ReturnDistribution(scale * d.values + shift, d.probs)


def convolve(d1: ReturnDistribution, d2: ReturnDistribution) -> ReturnDistribution:
    """Distribution of X + Y for independent X ~ d1 and Y ~ d2."""
    if len(d2) == 1:
        return affine(d1, 1.0, float(d2.values[0])) if d2.values[0] != 0 else d1
    if len(d1) == 1:
        return affine(d2, 1.0, float(d1.values[0])) if d1.values[0] != 0 else d2
    values = np.add.outer(d1.values, d2.values).ravel()
    probs = np.multiply.outer(d1.probs, d2.probs).ravel()
    return ReturnDistribution(values, probs)


def mix(parts: Iterable[Tuple[float, ReturnDistribution]]) -> ReturnDistribution:
    """Probability-weighted mixture; weights must sum to one."""
    parts = [(float(w), d) for w, d in parts]
    total = sum(w for w, _ in parts)
    if abs(total - 1.0) > PROB_SUM_TOL or any(w < 0 for w, _ in parts):
        raise DistributionError(format_error("weight_sum", total=total))
    parts = [(w, d) for w, d in parts if w > 0]
    if len(parts) == 1:
        return parts[0][1]
    values = np.concatenate([d.values for _, d in parts])
    probs = np.concatenate([w * d.probs for w, d in parts])
    return ReturnDistribution(values, probs)


def quantile(d: ReturnDistribution, u: ArrayLike) -> Union[float, np.ndarray]:
    """
    Left-continuous inverse CDF: smallest value whose CDF reaches u.

    Cumulative sums carry rounding, so u is compared against them shifted down
    by QUANTILE_TOL: a fraction within 1e-12 above a jump still maps to the
    atom at that jump. 0.7 + 0.1 sums to 0.7999999999999999, and u = 0.8 must
    select the second atom.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0) or np.any(u_arr >= 1) or not np.all(np.isfinite(u_arr)):
        bad = u_arr.ravel()[(u_arr.ravel() <= 0) | (u_arr.ravel() >= 1)]
        raise DistributionError(
            format_error("fraction_range", value=float(bad[0]) if bad.size else u)
        )
    idx = np.searchsorted(d.cumulative, u_arr - QUANTILE_TOL, side="left")
    out = d.values[np.minimum(idx, len(d) - 1)]
    return float(out) if out.ndim == 0 else out


def cdf(d: ReturnDistribution, x: float) -> float:
    """P(X <= x)."""
    if not np.isfinite(x):
        return 0.0 if x < 0 else 1.0
    idx = np.searchsorted(d.values, x, side="right")
    return 0.0 if idx == 0 else min(1.0, float(d.cumulative[idx - 1]))


def _quantile_steps(d1: ReturnDistribution, d2: ReturnDistribution):
    """Piecewise-constant quantile functions on the merged breakpoint grid."""
    breaks = np.union1d(np.concatenate(([0.0], d1.cumulative)), d2.cumulative)
    widths = np.diff(breaks)
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    q1 = d1.values[np.minimum(np.searchsorted(d1.cumulative, mids), len(d1) - 1)]
    q2 = d2.values[np.minimum(np.searchsorted(d2.cumulative, mids), len(d2) - 1)]
    return widths, q1, q2


def wasserstein(d1: ReturnDistribution, d2: ReturnDistribution, p: float = 1.0) -> float:
    """Exact p-Wasserstein distance via the quantile-function integral."""
    if p < 1:
        raise DistributionError(format_error("wasserstein_order", p=p))
    widths, q1, q2 = _quantile_steps(d1, d2)
    total = float(np.sum(widths * np.abs(q1 - q2) ** p))
    return total ** (1.0 / p)


def max_wasserstein(
    m1: KeyedDistributionMap, m2: KeyedDistributionMap, p: float = 1.0
) -> float:
    """Supremum of wasserstein over the shared keys of two maps."""
    if m1.keys() != m2.keys():
        only1 = len(m1.keys() - m2.keys())
        only2 = len(m2.keys() - m1.keys())
        raise DistributionError(
            format_error("key_mismatch", detail=f"{only1} only left, {only2} only right")
        )
    if not m1:
        return 0.0
    return max(wasserstein(m1[k], m2[k], p) for k in m1)


def prune(
    d: ReturnDistribution, max_atoms: int = DEFAULT_MAX_ATOMS
) -> Tuple[ReturnDistribution, float]:
    """
    Project onto at most `max_atoms` equally weighted quantile midpoints.

    Args:
        d: Distribution to compress
        max_atoms: Atom cap (>= 2)

    Returns:
        Tuple of (projected distribution, 1-Wasserstein error of the projection)
    """
    if max_atoms < 2:
        raise DistributionError(format_error("max_atoms", value=max_atoms))
    if len(d) <= max_atoms:
        return d, 0.0
    taus = (2.0 * np.arange(max_atoms) + 1.0) / (2.0 * max_atoms)
    projected = ReturnDistribution(quantile(d, taus), np.full(max_atoms, 1.0 / max_atoms))
    error = wasserstein(d, projected, 1.0)
    logger.debug(f"Pruned {len(d)} atoms to {len(projected)} (W1 error {error:.3g})")
    return projected, error


def sample(
    d: ReturnDistribution, rng: np.random.Generator, size: Optional[int] = None
) -> Union[float, np.ndarray]:
    """Inverse-CDF sampling."""
    u = rng.random(size)
    idx = np.minimum(np.searchsorted(d.cumulative, u, side="right"), len(d) - 1)
    out = d.values[idx]
    return float(out) if size is None else out
