"""
TQL Lab - Distortion Risk Measures

A distortion risk measure is scored in quantile form,
beta[X] = integral over tau of F^-1(g(tau)), where g is the measure's
quantile-fraction map. On a Dirac mixture the integral is a finite sum:
atom i receives the tau-mass T(c_i) - T(c_{i-1}), where c_i are the
cumulative probabilities and T(c) = sup{tau : g(tau) <= c}.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from .constants import BISECTION_TOL, CPW_MIN_ETA, DEFAULT_SAMPLE_SIZE
from .distributions import ReturnDistribution
from .errors import RiskMeasureError, format_error

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


def _scalar_or_array(out: np.ndarray, like) -> Union[float, np.ndarray]:
    return float(out) if np.ndim(like) == 0 else out


def normal_cdf(x: ArrayLike) -> Union[float, np.ndarray]:
    """Standard normal CDF."""
    return _scalar_or_array(special.ndtr(np.asarray(x, dtype=float)), x)


def normal_quantile(p: ArrayLike) -> Union[float, np.ndarray]:
    """
    Standard normal quantile.

    Raises:
        RiskMeasureError: if any p lies outside (0, 1)
    """
    p_arr = np.asarray(p, dtype=float)
    outside = ~((p_arr > 0) & (p_arr < 1))
    if np.any(outside):
        raise RiskMeasureError(format_error("probability_range", value=float(p_arr[outside].ravel()[0])))
    return _scalar_or_array(special.ndtri(p_arr), p)


class RiskKind(Enum):
    """Supported distortion families."""

    MEAN = "mean"
    CVAR = "cvar"
    WANG = "wang"
    CPW = "cpw"
    POW = "pow"


@dataclass(frozen=True)
class RiskMeasure:
    """A distortion risk measure: family plus its eta parameter."""

    kind: RiskKind
    eta: float = 0.0

    def __post_init__(self):
        eta = float(self.eta)
        if not math.isfinite(eta):
            self._reject("must be finite")
        if self.kind is RiskKind.MEAN:
            object.__setattr__(self, "eta", 0.0)
            return
        if self.kind is RiskKind.CVAR and not 0.0 < eta <= 1.0:
            self._reject("must lie in (0, 1]")
        if self.kind is RiskKind.CPW and eta < CPW_MIN_ETA:
            self._reject(f"must be at least {CPW_MIN_ETA} for a monotone weighting")
        object.__setattr__(self, "eta", eta)

    def _reject(self, reason: str):
        raise RiskMeasureError(
            format_error("measure_eta", eta=self.eta, kind=self.kind.value, reason=reason)
        )

    @classmethod
    def mean(cls) -> "RiskMeasure":
        return cls(RiskKind.MEAN)

    @classmethod
    def cvar(cls, eta: float) -> "RiskMeasure":
        return cls(RiskKind.CVAR, eta)

    @classmethod
    def wang(cls, eta: float) -> "RiskMeasure":
        return cls(RiskKind.WANG, eta)

    @classmethod
    def cpw(cls, eta: float) -> "RiskMeasure":
        return cls(RiskKind.CPW, eta)

    @classmethod
    def power(cls, eta: float) -> "RiskMeasure":
        return cls(RiskKind.POW, eta)

    @property
    def name(self) -> str:
        return str(self)

    def __str__(self) -> str:
        if self.kind is RiskKind.MEAN:
            return "mean"
        return f"{self.kind.value}:{self.eta:g}"


def parse_measure(spec: str) -> RiskMeasure:
    """Parse `mean`, `cvar:0.1`, `wang:-0.75`, `cpw:0.71` or `pow:-2.0`."""
    text = spec.strip().lower()
    name, sep, eta_text = text.partition(":")
    choices = ", ".join(k.value for k in RiskKind)
    try:
        kind = RiskKind(name)
    except ValueError:
        raise RiskMeasureError(format_error("unknown_measure", name=name, choices=choices))
    if kind is RiskKind.MEAN:
        if sep and eta_text:
            raise RiskMeasureError(format_error("bad_measure_spec", spec=spec))
        return RiskMeasure.mean()
    if not sep:
        raise RiskMeasureError(format_error("bad_measure_spec", spec=spec))
    try:
        eta = float(eta_text)
    except ValueError:
        raise RiskMeasureError(format_error("bad_measure_spec", spec=spec))
    return RiskMeasure(kind, eta)


def _cpw(tau: np.ndarray, eta: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        num = tau**eta
        den = (num + (1.0 - tau) ** eta) ** (1.0 / eta)
        out = np.where(den > 0, num / den, 0.0)
    return out


def fraction_map(m: RiskMeasure, tau: ArrayLike) -> Union[float, np.ndarray]:
    """
    Quantile-fraction map g of the measure.

    Args:
        m: Risk measure
        tau: Fraction(s) in [0, 1]

    Returns:
        g(tau), clipped to [0, 1]
    """
    shape = np.shape(tau)
    t = np.atleast_1d(np.asarray(tau, dtype=float)).ravel()
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise RiskMeasureError(format_error("tau_range"))

    if m.kind is RiskKind.MEAN:
        out = t.copy()
    elif m.kind is RiskKind.CVAR:
        out = m.eta * t
    elif m.kind is RiskKind.WANG:
        interior = (t > 0) & (t < 1)
        out = t.copy()
        if np.any(interior):
            out[interior] = normal_cdf(normal_quantile(t[interior]) + m.eta)
    elif m.kind is RiskKind.CPW:
        out = _cpw(t, m.eta)
    else:
        exponent = 1.0 / (1.0 + abs(m.eta))
        out = t**exponent if m.eta >= 0 else 1.0 - (1.0 - t) ** exponent
    return _scalar_or_array(np.clip(out, 0.0, 1.0).reshape(shape), tau)


def _cpw_inverse(c: np.ndarray, eta: float) -> np.ndarray:
    lo = np.zeros_like(c)
    hi = np.ones_like(c)
    while np.max(hi - lo, initial=0.0) > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        below = _cpw(mid, eta) <= c
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


def inverse_fraction_map(m: RiskMeasure, c: ArrayLike) -> np.ndarray:
    """T(c) = sup{tau : g(tau) <= c}, the tau-measure where g stays at or below c."""
    c = np.clip(np.atleast_1d(np.asarray(c, dtype=float)), 0.0, 1.0)
    if m.kind is RiskKind.MEAN:
        out = c.copy()
    elif m.kind is RiskKind.CVAR:
        out = np.minimum(c / m.eta, 1.0)
    elif m.kind is RiskKind.WANG:
        interior = (c > 0) & (c < 1)
        out = c.copy()
        if np.any(interior):
            out[interior] = normal_cdf(normal_quantile(c[interior]) - m.eta)
    elif m.kind is RiskKind.CPW:
        out = _cpw_inverse(c, m.eta)
    elif m.eta >= 0:
        out = c ** (1.0 + m.eta)
    else:
        out = 1.0 - (1.0 - c) ** (1.0 + abs(m.eta))
    out = np.clip(out, 0.0, 1.0)
    out[c >= 1.0] = 1.0
    out[c <= 0.0] = 0.0
    return out


def evaluate(m: RiskMeasure, d: ReturnDistribution) -> float:
    """Exact value of the measure on a Dirac mixture."""
    if len(d) == 1:
        return float(d.values[0])
    upper = inverse_fraction_map(m, d.cumulative)
    lower = np.concatenate(([0.0], upper[:-1]))
    return float(np.dot(d.values, upper - lower))


@lru_cache(maxsize=256)
def fraction_indices(m: RiskMeasure, n_quantiles: int, k_samples: int) -> np.ndarray:
    """Quantile indices hit by the deterministic midpoint grid of k_samples fractions."""
    taus = (np.arange(k_samples) + 0.5) / k_samples
    idx = np.floor(fraction_map(m, taus) * n_quantiles).astype(int)
    idx = np.clip(idx, 0, n_quantiles - 1)
    idx.setflags(write=False)
    return idx


def evaluate_sampled(
    m: RiskMeasure,
    quantile_values: Sequence[float],
    k_samples: int = DEFAULT_SAMPLE_SIZE,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Estimate the measure on an N-quantile critic.

    Deterministic midpoint fractions when rng is None, uniform draws otherwise.
    """
    values = np.asarray(quantile_values, dtype=float)
    if values.size == 0:
        raise RiskMeasureError(format_error("empty_quantiles"))
    n = values.size
    if rng is None:
        idx = fraction_indices(m, n, k_samples)
    else:
        u = fraction_map(m, rng.random(k_samples))
        idx = np.clip(np.floor(u * n).astype(int), 0, n - 1)
    return float(values[idx].mean())
