import numpy as np
import pytest
from scipy import stats

from creditrbm.errors import DataError, InsufficientTailDepthError
from creditrbm.rbm import RbmParameters, binary_states, exact_visible_marginal
from creditrbm.rng import RngStream
from creditrbm.tail import (
    TailCurve,
    default_thresholds,
    exact_loss_pmf,
    exact_tail,
    mc_tail,
    portfolio_loss,
    rbm_loss_sampler,
    sample_recoveries,
    tail_from_losses,
    var_from_tail,
)


class TestPortfolioLoss:
    def test_no_defaults(self):
        assert portfolio_loss([0, 0, 0]) == 0.0

    def test_all_default_no_recovery(self):
        assert portfolio_loss([1, 1, 1, 1], [0, 0, 0, 0]) == 4.0

    def test_with_recoveries(self):
        assert portfolio_loss([1, 1, 0], [0.5, 0.25, 0.9]) == pytest.approx(1.25)

    def test_exposures(self):
        assert portfolio_loss([1, 0, 1], exposures=[2.0, 5.0, 3.0]) == 5.0

    def test_recovery_range_checked(self):
        with pytest.raises(DataError):
            portfolio_loss([1, 0], [1.2, 0.0])

    def test_batch(self):
        d = np.array([[1, 0], [1, 1]])
        np.testing.assert_array_equal(portfolio_loss(d), [1, 2])


class TestRecoveries:
    def test_moments(self):
        r = sample_recoveries(1_000_000, RngStream(3))
        assert abs(r.mean() - 0.5) < 4 * np.sqrt(1 / 8 / 1e6)
        # arcsine law: variance 1/8, fourth central moment 3/128
        assert abs(r.var() - 1 / 8) < 4 * np.sqrt((3 / 128 - 1 / 64) / 1e6)

    def test_reproducible(self):
        np.testing.assert_array_equal(sample_recoveries(10, RngStream(1)), sample_recoveries(10, RngStream(1)))

    def test_ks_against_arcsine_cdf(self):
        r = sample_recoveries(100_000, RngStream(4))
        cdf = lambda x: 2 / np.pi * np.arcsin(np.sqrt(np.clip(x, 0, 1)))  # noqa: E731
        assert stats.kstest(r, cdf).pvalue > 1e-3


class TestMcTail:
    def test_degenerate_full_default(self):
        n = 5
        curve = mc_tail(lambda m, g: np.full(m, float(n)), np.arange(n + 1), 200, RngStream(0))
        np.testing.assert_array_equal(curve.estimates[:n], 1.0)
        assert curve.estimates[n] == 0.0
        assert curve.ci_high[n] == pytest.approx(3 / 200)

    def test_ci_contains_estimate(self):
        curve = mc_tail(lambda m, g: g.binomial(10, 0.3, m).astype(float), np.arange(11), 1000, RngStream(1))
        assert np.all(curve.ci_low <= curve.estimates) and np.all(curve.estimates <= curve.ci_high)
        assert curve.is_monotone()

    def test_requires_enough_samples(self):
        with pytest.raises(ValueError):
            mc_tail(lambda m, g: np.zeros(m), [0.0], 50, RngStream(0))

    def test_tiny_rbm_coverage(self):
        p = RbmParameters.random(5, 3, rng=12, scale=0.8)
        exact = exact_tail(exact_loss_pmf(p), np.arange(5)).estimates
        covered = 0
        for seed in range(20):
            curve = mc_tail(rbm_loss_sampler(p, burn_in=200), np.arange(5), 2000, RngStream(seed))
            covered += np.all((curve.ci_low <= exact) & (exact <= curve.ci_high))
        assert covered >= 14

    def test_ci_width_scaling(self):
        sampler = lambda m, g: g.binomial(20, 0.2, m).astype(float)  # noqa: E731
        th = np.arange(2, 8)
        w1 = mc_tail(sampler, th, 20_000, RngStream(5))
        w2 = mc_tail(sampler, th, 40_000, RngStream(6))
        ratio = np.mean(w2.ci_high - w2.ci_low) / np.mean(w1.ci_high - w1.ci_low)
        assert 0.6 <= ratio <= 0.8

    def test_relative_losses_bounded(self):
        p = RbmParameters.random(6, 2, rng=1)
        losses = rbm_loss_sampler(p, burn_in=10, recoveries=True, relative=True)(500, np.random.default_rng(0))
        assert losses.min() >= 0 and losses.max() <= 1

    def test_plain_mc_never_reports_sub_resolution_positive(self):
        curve = tail_from_losses(np.arange(1000.0), np.linspace(0, 2000, 50))
        positive = curve.estimates[curve.estimates > 0]
        assert positive.min() >= 1 / 1000

    def test_default_threshold_grid(self):
        np.testing.assert_allclose(default_thresholds(4), [0, 0.25, 0.5, 0.75, 1.0])


class TestVar:
    def test_point_mass(self):
        pmf = np.zeros(11)
        pmf[5] = 1.0
        curve = exact_tail(pmf, np.arange(11))
        for alpha in (0.5, 0.9, 0.999, 0.999999):
            assert var_from_tail(curve, alpha).value == 5

    def test_exact_quantile_on_tiny_rbm(self):
        p = RbmParameters.random(6, 3, rng=8)
        pmf = exact_loss_pmf(p)
        curve = exact_tail(pmf, np.arange(7))
        cdf = np.cumsum(pmf)
        expected = int(np.flatnonzero(cdf >= 0.9 - 1e-15)[0])
        assert var_from_tail(curve, 0.9).value == expected

    def test_pmf_matches_marginal(self):
        p = RbmParameters.random(4, 2, rng=2)
        marg = exact_visible_marginal(p)
        counts = binary_states(4).sum(axis=1)
        np.testing.assert_allclose(exact_loss_pmf(p), [marg[counts == k].sum() for k in range(5)])

    def test_insufficient_depth(self):
        losses = np.random.default_rng(0).binomial(30, 0.1, 10_000).astype(float)
        curve = tail_from_losses(losses, np.arange(31))
        with pytest.raises(InsufficientTailDepthError) as err:
            var_from_tail(curve, 0.99999)
        assert err.value.deepest_level == pytest.approx(1 - 1e-4)
        assert "deepest" in str(err.value)

    def test_monotone_in_alpha_with_ci(self):
        losses = np.random.default_rng(1).binomial(30, 0.1, 10_000).astype(float)
        curve = tail_from_losses(losses, np.arange(31))
        vals = [var_from_tail(curve, a) for a in (0.5, 0.8, 0.9, 0.95, 0.99, 0.999)]
        assert all(a.value <= b.value for a, b in zip(vals, vals[1:]))
        assert all(v.ci_low <= v.value <= v.ci_high for v in vals)

    def test_bad_alpha(self):
        curve = exact_tail([0.5, 0.5], [0, 1])
        with pytest.raises(ValueError):
            var_from_tail(curve, 1.0)


def test_curve_csv_round_trip(tmp_path):
    curve = tail_from_losses(np.random.default_rng(2).random(500), np.linspace(0, 1, 11))
    curve.write_csv(tmp_path / "c.csv")
    back = TailCurve.read_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.estimates, curve.estimates)
    np.testing.assert_array_equal(back.ci_high, curve.ci_high)
    assert back.method == "mc" and back.samples == 500 and back.resolution == curve.resolution
