import math

import numpy as np
import pytest

from synlik.bsl import CrnStore, synth_moments
from synlik.mathcore import LOG_2PI, RngStream, std_normal_cdf
from synlik.models.toy import (
    ToyData,
    ToyModel,
    ToyVariant,
    conjugate_posterior,
    simulate_toy_data,
    toy_exceedance_prob,
    toy_logposterior,
)


@pytest.fixture
def data():
    return simulate_toy_data(120, 10, 2.0, 1.0, 1.0, RngStream(21))


@pytest.fixture
def crn():
    return CrnStore.draw(25, 110, 1, seed=4)


class TestExceedanceProb:
    def test_half_at_threshold(self):
        assert toy_exceedance_prob(2.0, 1.3, 2.0) == pytest.approx(0.5, abs=1e-14)

    def test_saturates_far_below(self):
        assert toy_exceedance_prob(-50.0, 1.0, 2.0) == pytest.approx(0.0, abs=1e-12)

    def test_cdf_oracle_point(self):
        expected = 1.0 - 0.8413447460685429  # 1 - Phi(1), frozen from the erfc oracle
        assert toy_exceedance_prob(1.0, 1.0, 2.0) == pytest.approx(expected, abs=1e-12)

    def test_smooth_in_mu(self):
        mus = np.linspace(-3, 3, 301)
        ps = np.array([toy_exceedance_prob(m, 1.0, 2.0) for m in mus])
        assert np.all(np.diff(ps) > 0)


class TestToyData:
    def test_validates_proportion_count(self):
        with pytest.raises(ValueError):
            ToyData(y_obs=np.zeros(2), n=10, m=2, c=0.0, s_obs=0.123, sigma=1.0)

    def test_simulated_consistency(self, data):
        assert data.y_full.size == data.n
        assert np.array_equal(data.y_obs, data.y_full[: data.m])
        assert data.s_obs * data.n == np.sum(data.y_full > data.c)


class TestVariants:
    def test_simple_equals_sum_of_scalar_logpdfs(self, data, crn):
        mu = 0.73
        val, _ = toy_logposterior(ToyVariant.SIMPLE, data, crn, mu)
        expected = -0.5 * LOG_2PI - 0.5 * ((mu - data.prior_mean) / data.prior_sd) ** 2 \
            - math.log(data.prior_sd)
        for y in data.y_obs:
            expected += -0.5 * LOG_2PI - 0.5 * (y - mu) ** 2
        assert val == pytest.approx(expected, rel=1e-12)

    def test_oracle_requires_full_sample(self, crn):
        partial = ToyData(y_obs=np.zeros(3), n=10, m=3, c=0.0, s_obs=0.5, sigma=1.0)
        with pytest.raises(ValueError):
            ToyModel(ToyVariant.ORACLE, partial)

    def test_bsl_variants_require_crn(self, data):
        with pytest.raises(ValueError):
            ToyModel(ToyVariant.BSL_CONTINUOUS, data)

    def test_continuous_synthetic_term_peaks_at_synthetic_mean(self, data, crn):
        # with s_obs set to the synthetic-moment mean, the synthetic term sits
        # at its own maximum over s_obs
        mu = 0.9
        model = ToyModel(ToyVariant.BSL_CONTINUOUS, data, crn)
        _, _, x, _ = model._relaxed_counts(mu)[1:]
        s_b = (data.observed_exceed_count + x) / data.n
        m = synth_moments(s_b[:, None])
        best = ToyData(y_obs=data.y_obs, n=data.n, m=data.m, c=data.c,
                       s_obs=round(float(m.mean[0]) * data.n) / data.n, sigma=data.sigma,
                       y_full=data.y_full)
        v_best = ToyModel(ToyVariant.BSL_CONTINUOUS, best, crn).evaluate(np.array([mu]))[0]
        for shift in (-0.05, 0.05):
            s_alt = min(1.0, max(0.0, round((m.mean[0] + shift) * data.n) / data.n))
            alt = ToyData(y_obs=data.y_obs, n=data.n, m=data.m, c=data.c,
                          s_obs=s_alt, sigma=data.sigma, y_full=data.y_full)
            v_alt = ToyModel(ToyVariant.BSL_CONTINUOUS, alt, crn).evaluate(np.array([mu]))[0]
            assert v_alt <= v_best + 1e-9

    def test_conjugate_oracle_formula(self, data):
        mean, sd = conjugate_posterior(data.y_full, 1.0, 0.0, 10.0)
        precision = 1 / 100.0 + 120.0
        assert sd == pytest.approx(1 / math.sqrt(precision), rel=1e-12)
        assert mean == pytest.approx(data.y_full.sum() / precision, rel=1e-12)

    def test_individual_variant_gradient_ignores_indicators(self, data, crn):
        mu = 0.6
        _, g_ind = toy_logposterior(ToyVariant.BSL_INDIVIDUAL, data, crn, mu)
        _, g_simple = toy_logposterior(ToyVariant.SIMPLE, data, crn, mu)
        assert g_ind[0] == pytest.approx(g_simple[0], rel=1e-12)

    def test_individual_variant_value_includes_synthetic_term(self, data, crn):
        mu = 0.6
        v_ind, _ = toy_logposterior(ToyVariant.BSL_INDIVIDUAL, data, crn, mu)
        v_simple, _ = toy_logposterior(ToyVariant.SIMPLE, data, crn, mu)
        assert v_ind != pytest.approx(v_simple)

    def test_generated_quantities_reproducible(self, data, crn):
        model = ToyModel(ToyVariant.BSL_CONTINUOUS, data, crn, b_disc=500)
        a = model.generated_quantities(np.array([1.1]), RngStream(3, 5))
        b = model.generated_quantities(np.array([1.1]), RngStream(3, 5))
        assert a == b
        assert math.isfinite(a["l_cont"]) and math.isfinite(a["l_disc"])

    def test_generated_quantities_only_for_continuous(self, data, crn):
        model = ToyModel(ToyVariant.SIMPLE, data, crn)
        assert model.generated_quantities is None


def test_continuous_and_individual_posteriors_agree(data=None):
    """The relaxed-binomial and individual-imputation posteriors land on the
    same mean (within 0.1) for matched data and seeds."""
    from synlik.hmc import HmcConfig, run_chains

    data = simulate_toy_data(120, 10, 2.0, 1.0, 1.0, RngStream(31))
    crn = CrnStore.draw(25, 110, 1, seed=6)
    means = {}
    for variant in (ToyVariant.BSL_CONTINUOUS, ToyVariant.BSL_INDIVIDUAL):
        model = ToyModel(variant, data, crn)
        cfg = HmcConfig(n_chains=2, n_warmup=500, n_sampling=1000, seed=13,
                        max_leapfrog_steps=32)
        chains = run_chains(model, cfg)
        means[variant] = float(np.vstack([c.draws for c in chains]).mean())
    assert abs(means[ToyVariant.BSL_CONTINUOUS] - means[ToyVariant.BSL_INDIVIDUAL]) < 0.1
