"""Tests for return distributions and their algebra."""

import numpy as np
import pytest
from scipy import stats

from core.distributions import (
    ReturnDistribution,
    affine,
    cdf,
    convolve,
    dirac,
    max_wasserstein,
    mix,
    normalize,
    prune,
    quantile,
    sample,
    wasserstein,
)
from core.errors import DistributionError


class TestCanonicalForm:
    """Construction, merging and validation."""

    def test_sorted_and_normalized(self):
        """Atoms are sorted and weights renormalized."""
        d = ReturnDistribution([3.0, -1.0, 2.0], [2.0, 1.0, 1.0])
        assert d.values.tolist() == [-1.0, 2.0, 3.0]
        assert d.probs.tolist() == pytest.approx([0.25, 0.25, 0.5])
        assert d.cumulative[-1] == 1.0

    def test_duplicate_values_merge(self):
        """Equal values collapse into one atom."""
        d = normalize([(1.0, 0.5), (1.0, 0.5)])
        assert d == dirac(1.0)

    def test_near_values_chain_merge(self):
        """Neighbours within the merge tolerance join one group."""
        d = ReturnDistribution([0.0, 5e-10, 1e-9], [0.2, 0.3, 0.5])
        assert len(d) == 1
        assert d.values[0] == 0.0

    def test_zero_probability_atoms_dropped(self):
        """Atoms with zero weight disappear."""
        d = ReturnDistribution([0.0, 1.0], [0.0, 1.0])
        assert d.atoms == ((1.0, 1.0),)

    def test_arrays_are_read_only(self):
        """Stored arrays cannot be mutated."""
        d = ReturnDistribution([0.0, 1.0])
        with pytest.raises(ValueError):
            d.values[0] = 5.0

    @pytest.mark.parametrize(
        "values,probs",
        [([np.nan], [1.0]), ([np.inf], [1.0]), ([0.0, 1.0], [-0.1, 1.1]), ([0.0], [0.0])],
    )
    def test_invalid_input_rejected(self, values, probs):
        """Non-finite values, negative weights and zero mass raise."""
        with pytest.raises(DistributionError):
            ReturnDistribution(values, probs)

    def test_empty_normalize_rejected(self):
        """An empty atom list has no mass."""
        with pytest.raises(DistributionError):
            normalize([])


class TestAlgebra:
    """Affine maps, convolution and mixtures."""

    def test_affine(self, coin):
        """scale * X + shift maps every atom."""
        d = affine(coin, 0.5, 1.0)
        assert d.values.tolist() == [-4.0, 51.0]
        assert d.probs.tolist() == pytest.approx([0.1, 0.9])

    def test_affine_zero_scale_is_dirac(self, coin):
        """Scale 0 collapses onto the shift."""
        assert affine(coin, 0.0, 3.0) == dirac(3.0)

    def test_affine_negative_scale_rejected(self, coin):
        """Negative scales would reverse the order."""
        with pytest.raises(DistributionError):
            affine(coin, -1.0, 0.0)

    def test_convolve_two_coins(self):
        """Sum of two fair 0/1 coins."""
        fair = ReturnDistribution([0.0, 1.0])
        d = convolve(fair, fair)
        assert d.values.tolist() == [0.0, 1.0, 2.0]
        assert d.probs.tolist() == pytest.approx([0.25, 0.5, 0.25])

    def test_convolve_three_state_optimum(self, coin):
        """Two independent risky rewards."""
        d = convolve(coin, coin)
        assert d.values.tolist() == [-20.0, 90.0, 200.0]
        assert d.probs.tolist() == pytest.approx([0.01, 0.18, 0.81])

    def test_convolve_with_dirac_shifts(self, coin):
        """Adding a constant is a shift."""
        assert convolve(coin, dirac(-5.0)) == affine(coin, 1.0, -5.0)

    def test_means_add(self, rng, make_distribution):
        """E[X + Y] = E[X] + E[Y]."""
        for _ in range(20):
            a, b = make_distribution(rng), make_distribution(rng)
            assert convolve(a, b).mean == pytest.approx(a.mean + b.mean, abs=1e-9)

    def test_mix(self):
        """Mixture weights scale each component."""
        d = mix([(0.25, dirac(0.0)), (0.75, ReturnDistribution([0.0, 4.0]))])
        assert d.values.tolist() == [0.0, 4.0]
        assert d.probs.tolist() == pytest.approx([0.625, 0.375])

    def test_mix_weights_must_sum_to_one(self):
        """Weights off by more than the tolerance raise."""
        with pytest.raises(DistributionError):
            mix([(0.5, dirac(0.0)), (0.4, dirac(1.0))])


class TestQueries:
    """Quantiles, CDF and sampling."""

    def test_quantile_is_left_continuous(self, coin):
        """At a CDF jump the lower value is returned."""
        assert quantile(coin, 0.05) == -10.0
        assert quantile(coin, 0.1) == -10.0
        assert quantile(coin, 0.1000001) == 100.0
        assert quantile(coin, 0.99) == 100.0

    def test_quantile_at_rounded_jump(self):
        """A jump whose cumulative sum rounds low still belongs to its atom."""
        d = ReturnDistribution([0.0, 1.0, 2.0], [0.7, 0.1, 0.2])
        assert quantile(d, 0.8) == 1.0
        assert quantile(d, 0.8 + 1e-9) == 2.0
        assert quantile(d, 0.7) == 0.0

    def test_quantile_vectorized(self, coin):
        """Array input gives array output."""
        out = quantile(coin, np.array([0.05, 0.5]))
        assert out.tolist() == [-10.0, 100.0]

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.5, 1.5])
    def test_quantile_range(self, coin, u):
        """Fractions outside (0, 1) raise."""
        with pytest.raises(DistributionError):
            quantile(coin, u)

    def test_cdf(self, coin):
        """Right-continuous CDF."""
        assert cdf(coin, -11.0) == 0.0
        assert cdf(coin, -10.0) == pytest.approx(0.1)
        assert cdf(coin, 50.0) == pytest.approx(0.1)
        assert cdf(coin, 100.0) == 1.0

    def test_sample_frequencies(self, coin, rng):
        """Inverse-CDF draws match the atom weights."""
        draws = sample(coin, rng, size=100_000)
        assert set(np.unique(draws)) == {-10.0, 100.0}
        assert np.mean(draws == -10.0) == pytest.approx(0.1, abs=0.005)

    def test_sample_scalar(self, coin, rng):
        """Without a size a float is returned."""
        assert isinstance(sample(coin, rng), float)


class TestWasserstein:
    """Exact distances and pruning."""

    def test_dirac_distance(self):
        """Distance between point masses is their gap, for any p."""
        assert wasserstein(dirac(0.0), dirac(3.0), 1) == pytest.approx(3.0)
        assert wasserstein(dirac(0.0), dirac(3.0), 2) == pytest.approx(3.0)

    def test_two_point_against_center(self):
        """{0, 2} against dirac(1)."""
        d = ReturnDistribution([0.0, 2.0])
        assert wasserstein(d, dirac(1.0), 1) == pytest.approx(1.0)
        assert wasserstein(d, dirac(1.0), 2) == pytest.approx(1.0)

    def test_matches_scipy(self, rng, make_distribution):
        """W1 agrees with scipy's independent implementation."""
        for _ in range(50):
            a, b = make_distribution(rng, 5), make_distribution(rng, 5)
            expected = stats.wasserstein_distance(a.values, b.values, a.probs, b.probs)
            assert wasserstein(a, b, 1) == pytest.approx(expected, abs=1e-9)

    def test_order_below_one_rejected(self, coin):
        """p < 1 is not a metric."""
        with pytest.raises(DistributionError):
            wasserstein(coin, coin, 0.5)

    def test_max_over_keys(self, coin):
        """Supremum over shared keys."""
        m1 = {"a": dirac(0.0), "b": coin}
        m2 = {"a": dirac(2.0), "b": coin}
        assert max_wasserstein(m1, m2) == pytest.approx(2.0)
        assert max_wasserstein({}, {}) == 0.0

    def test_max_key_mismatch(self, coin):
        """Maps with different keys cannot be compared."""
        with pytest.raises(DistributionError):
            max_wasserstein({"a": coin}, {"b": coin})

    def test_prune_small_is_identity(self, coin):
        """Distributions under the cap are untouched."""
        d, err = prune(coin, 4)
        assert d is coin
        assert err == 0.0

    def test_prune_reports_error(self, rng):
        """Pruned size respects the cap; the error is the W1 of the projection."""
        d = ReturnDistribution(rng.normal(size=200))
        pruned, err = prune(d, 16)
        assert len(pruned) <= 16
        assert err == pytest.approx(wasserstein(d, pruned, 1))
        assert err > 0

    def test_prune_cap_too_small(self, coin):
        """A single-atom cap is rejected."""
        with pytest.raises(DistributionError):
            prune(coin, 1)
