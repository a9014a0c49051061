"""Tests for distortion risk measures."""

import numpy as np
import pytest

from core.distributions import ReturnDistribution, affine, dirac, quantile
from core.errors import RiskMeasureError
from core.risk import (
    RiskKind,
    RiskMeasure,
    evaluate,
    evaluate_sampled,
    fraction_indices,
    fraction_map,
    inverse_fraction_map,
    normal_cdf,
    normal_quantile,
    parse_measure,
)

MEASURES = [
    RiskMeasure.mean(),
    RiskMeasure.cvar(0.1),
    RiskMeasure.cvar(0.5),
    RiskMeasure.wang(-0.75),
    RiskMeasure.wang(0.5),
    RiskMeasure.cpw(0.71),
    RiskMeasure.power(-2.0),
    RiskMeasure.power(1.5),
]


class TestNormal:
    """Test cases for the standard normal helpers."""

    def test_quantile_symmetry_and_tails(self):
        """Phi^-1(1 - p) = -Phi^-1(p), and deep tails stay finite."""
        p = np.linspace(1e-6, 0.5, 201)
        assert np.allclose(normal_quantile(1 - p), -normal_quantile(p), atol=1e-8)
        assert np.isfinite(normal_quantile(1e-300))
        assert normal_quantile(0.5) == 0.0

    def test_known_value(self):
        """The 97.5% point."""
        assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-9)

    def test_cdf_inverts_quantile(self):
        """Phi(Phi^-1(p)) = p."""
        p = np.linspace(0.001, 0.999, 99)
        assert np.allclose(normal_cdf(normal_quantile(p)), p, atol=1e-12)

    def test_probability_range(self):
        """Endpoints have no finite quantile."""
        with pytest.raises(RiskMeasureError):
            normal_quantile(0.0)
        with pytest.raises(RiskMeasureError, match="1.5"):
            normal_quantile(np.array([0.2, 1.5]))


class TestParsing:
    """Test cases for measure construction and parsing."""

    @pytest.mark.parametrize(
        "spec,kind,eta",
        [
            ("mean", RiskKind.MEAN, 0.0),
            ("cvar:0.1", RiskKind.CVAR, 0.1),
            ("CVaR:0.5", RiskKind.CVAR, 0.5),
            ("wang:-0.75", RiskKind.WANG, -0.75),
            ("cpw:0.71", RiskKind.CPW, 0.71),
            ("pow:-2", RiskKind.POW, -2.0),
        ],
    )
    def test_parse(self, spec, kind, eta):
        """Specs map to the right family and parameter."""
        m = parse_measure(spec)
        assert m.kind is kind
        assert m.eta == pytest.approx(eta)

    def test_str_round_trip(self):
        """str() produces a parseable spec."""
        m = parse_measure("wang:-0.75")
        assert str(m) == "wang:-0.75"
        assert parse_measure(str(m)) == m

    @pytest.mark.parametrize("spec", ["cvar:1.5", "cvar:0", "foo:1", "cvar", "cvar:abc", "cpw:0.2", "mean:3"])
    def test_invalid(self, spec):
        """Bad families, missing or out-of-range parameters raise."""
        with pytest.raises(RiskMeasureError):
            parse_measure(spec)

    def test_unknown_family_message(self):
        """The message names the family and the valid choices."""
        with pytest.raises(RiskMeasureError, match="Unknown risk measure 'var'"):
            parse_measure("var:0.1")

    def test_measures_are_hashable(self):
        """Measures serve as cache keys."""
        assert len({RiskMeasure.cvar(0.1), parse_measure("cvar:0.1")}) == 1


class TestFractionMap:
    """Test cases for g and its generalized inverse T."""

    @pytest.mark.parametrize("m", MEASURES, ids=str)
    def test_monotone_with_fixed_endpoints(self, m):
        """g is non-decreasing; CVaR excepted, g(0)=0 and g(1)=1."""
        tau = np.linspace(0.0, 1.0, 201)
        g = fraction_map(m, tau)
        assert np.all(np.diff(g) >= -1e-12)
        assert g[0] == pytest.approx(0.0)
        if m.kind is not RiskKind.CVAR:
            assert g[-1] == pytest.approx(1.0)

    def test_cvar_scales(self):
        """CVaR maps tau to eta * tau."""
        assert fraction_map(RiskMeasure.cvar(0.1), 0.5) == pytest.approx(0.05)

    @pytest.mark.parametrize(
        "m",
        [RiskMeasure.wang(-0.75), RiskMeasure.cpw(0.71), RiskMeasure.power(-2.0), RiskMeasure.power(1.5)],
        ids=str,
    )
    def test_inverse_of_continuous_map(self, m):
        """g(T(c)) = c for continuous increasing g."""
        c = np.linspace(0.01, 0.99, 50)
        assert np.allclose(fraction_map(m, inverse_fraction_map(m, c)), c, atol=1e-9)

    def test_cvar_inverse_saturates(self):
        """T(c) = min(c / eta, 1) for CVaR."""
        out = inverse_fraction_map(RiskMeasure.cvar(0.25), [0.1, 0.25, 0.6])
        assert out.tolist() == pytest.approx([0.4, 1.0, 1.0])

    def test_tau_range(self):
        """Fractions outside [0, 1] raise."""
        with pytest.raises(RiskMeasureError):
            fraction_map(RiskMeasure.mean(), 1.5)


class TestEvaluate:
    """Test cases for exact evaluation on Dirac mixtures."""

    def test_cvar_of_coin(self, coin, cvar01):
        """The lower 10% of the coin is its bad outcome."""
        assert evaluate(cvar01, coin) == pytest.approx(-10.0)

    def test_cvar_of_two_coins(self, coin, cvar01):
        """CVaR(0.1) of coin + coin: 0.01 at -20, 0.09 at 90."""
        d = ReturnDistribution([-20.0, 90.0, 200.0], [0.01, 0.18, 0.81])
        assert evaluate(cvar01, d) == pytest.approx(79.0, abs=1e-9)

    def test_full_cvar_is_mean(self, coin):
        """CVaR(1) is the expectation."""
        assert evaluate(RiskMeasure.cvar(1.0), coin) == pytest.approx(coin.mean)

    @pytest.mark.parametrize("m", [RiskMeasure.wang(0.0), RiskMeasure.power(0.0), RiskMeasure.mean()], ids=str)
    def test_neutral_parameters(self, m, rng, make_distribution):
        """Zero distortion is the mean."""
        for _ in range(10):
            d = make_distribution(rng, 5)
            assert evaluate(m, d) == pytest.approx(d.mean, abs=1e-9)

    @pytest.mark.parametrize("m", MEASURES, ids=str)
    def test_dirac(self, m):
        """A point mass is worth its value under every measure."""
        assert evaluate(m, dirac(3.5)) == 3.5

    @pytest.mark.parametrize("m", MEASURES, ids=str)
    def test_positive_affine_equivariance(self, m, rng, make_distribution):
        """beta(a X + b) = a beta(X) + b for a >= 0."""
        for _ in range(10):
            d = make_distribution(rng, 4)
            assert evaluate(m, affine(d, 2.0, 3.0)) == pytest.approx(2.0 * evaluate(m, d) + 3.0, abs=1e-9)

    @pytest.mark.parametrize("m", MEASURES, ids=str)
    def test_bounded_by_support(self, m, rng, make_distribution):
        """The value lies between the smallest and largest atom."""
        for _ in range(10):
            d = make_distribution(rng, 5)
            assert d.values[0] - 1e-9 <= evaluate(m, d) <= d.values[-1] + 1e-9

    @pytest.mark.parametrize("m", MEASURES, ids=str)
    def test_matches_monte_carlo(self, m, rng, make_distribution):
        """Exact value agrees with E[F^-1(g(U))] within four standard errors."""
        n = 200_000
        for _ in range(3):
            d = make_distribution(rng, 4)
            u = np.clip(fraction_map(m, rng.random(n)), 1e-12, 1.0 - 1e-12)
            draws = quantile(d, u)
            se = draws.std() / np.sqrt(n)
            assert abs(evaluate(m, d) - draws.mean()) <= 4.0 * se + 1e-9


class TestEvaluateSampled:
    """Test cases for the quantile-critic estimator."""

    def test_cvar_of_critic(self, coin, cvar01):
        """A 50-quantile critic of the coin has its lower tail at -10."""
        taus = (np.arange(50) + 0.5) / 50
        assert evaluate_sampled(cvar01, quantile(coin, taus)) == pytest.approx(-10.0)

    def test_constant_critic(self):
        """A constant critic is worth its value."""
        for m in MEASURES:
            assert evaluate_sampled(m, [2.0] * 10) == pytest.approx(2.0)

    def test_stochastic_fractions(self, rng):
        """Random fractions stay inside the critic's range."""
        values = np.linspace(-1.0, 1.0, 20)
        est = evaluate_sampled(RiskMeasure.wang(-0.75), values, k_samples=64, rng=rng)
        assert -1.0 <= est <= 1.0

    def test_indices_cached_and_read_only(self):
        """The index grid is reused and immutable."""
        m = RiskMeasure.cvar(0.1)
        idx = fraction_indices(m, 50, 128)
        assert fraction_indices(m, 50, 128) is idx
        assert idx.min() >= 0 and idx.max() <= 4
        with pytest.raises(ValueError):
            idx[0] = 1

    def test_empty(self):
        """An empty critic cannot be evaluated."""
        with pytest.raises(RiskMeasureError):
            evaluate_sampled(RiskMeasure.mean(), [])
