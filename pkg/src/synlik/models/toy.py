"""Normal-mean toy problem with partially observed data and an exceedance
summary: the analytic oracle, the observed-only posterior, and two synthetic
likelihood variants (individual-level imputation and the relaxed binomial
sufficient-statistic form).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..bsl import CrnStore, SyntheticMoments, continuous_synth_loglik_grads, discrete_synth_loglik, synth_moments, synth_moments_vjp
from ..errors import NonFiniteDensity
from ..mathcore import LOG_2PI, RngStream, std_normal_cdf, std_normal_pdf


class ToyVariant(enum.Enum):
    ORACLE = "oracle"
    SIMPLE = "simple"
    BSL_INDIVIDUAL = "bsl-individual"
    BSL_CONTINUOUS = "bsl-continuous"


@dataclass
class ToyData:
    """Observed slice of an iid normal sample plus a full-sample exceedance
    proportion.

    ``y_full`` keeps the unobserved values for oracle fits in experiments; the
    inference methods other than the oracle never touch it.
    """

    y_obs: np.ndarray
    n: int
    m: int
    c: float
    s_obs: float
    sigma: float
    prior_mean: float = 0.0
    prior_sd: float = 10.0
    y_full: np.ndarray | None = None

    def __post_init__(self):
        self.y_obs = np.asarray(self.y_obs, dtype=float)
        if self.m > self.n:
            raise ValueError("m cannot exceed n")
        if self.y_obs.size != self.m:
            raise ValueError(f"y_obs has {self.y_obs.size} values, expected m={self.m}")
        if not 0.0 <= self.s_obs <= 1.0:
            raise ValueError("s_obs must be a proportion")
        if abs(self.s_obs * self.n - round(self.s_obs * self.n)) > 1e-9:
            raise ValueError("s_obs * n must be an integer count")

    @property
    def observed_exceed_count(self) -> int:
        return int(np.sum(self.y_obs > self.c))


def simulate_toy_data(n, m, c, sigma, mu_true, rng: RngStream, prior_mean=0.0, prior_sd=10.0) -> ToyData:
    """Draw a complete sample at the true mean, retain the first m values, and
    record the full-sample exceedance proportion."""
    gen = rng.generator()
    y_full = mu_true + sigma * gen.standard_normal(n)
    s_obs = float(np.sum(y_full > c)) / n
    return ToyData(
        y_obs=y_full[:m], n=n, m=m, c=c, s_obs=s_obs, sigma=sigma,
        prior_mean=prior_mean, prior_sd=prior_sd, y_full=y_full,
    )


def conjugate_posterior(values, sigma, prior_mean, prior_sd) -> tuple[float, float]:
    """Exact normal-normal posterior mean and SD for a known-variance sample."""
    values = np.asarray(values, dtype=float)
    precision = 1.0 / prior_sd**2 + values.size / sigma**2
    mean = (prior_mean / prior_sd**2 + values.sum() / sigma**2) / precision
    return float(mean), float(1.0 / math.sqrt(precision))


def toy_exceedance_prob(mu, sigma, c):
    """Probability that one observation exceeds the threshold."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return 1.0 - std_normal_cdf((c - mu) / sigma)


def _normal_loglik_terms(values, mu, sigma):
    """(log likelihood, d/dmu) for iid normal values with known sigma."""
    values = np.asarray(values, dtype=float)
    resid = values - mu
    val = -0.5 * values.size * (LOG_2PI + 2.0 * math.log(sigma)) - 0.5 * float(resid @ resid) / sigma**2
    return val, float(resid.sum()) / sigma**2


class ToyModel:
    """One-parameter log posterior for a toy variant, with analytic gradient.

    The individual-level synthetic variant treats its indicator summaries as
    locally constant in mu (zero gradient contribution); the continuous variant
    backpropagates through the relaxed binomial, its moments, and the scalar
    synthetic normal.
    """

    dim = 1

    def __init__(self, variant: ToyVariant, data: ToyData, crn: CrnStore | None = None, b_disc: int = 1000):
        if variant in (ToyVariant.BSL_INDIVIDUAL, ToyVariant.BSL_CONTINUOUS) and crn is None:
            raise ValueError(f"{variant.value} requires a CrnStore")
        if variant is ToyVariant.ORACLE and data.y_full is None:
            raise ValueError("oracle variant requires the complete sample in y_full")
        self.variant = variant
        self.data = data
        self.crn = crn
        self.b_disc = b_disc
        if variant is not ToyVariant.BSL_CONTINUOUS:
            # only the continuous variant exports (l_cont, l_disc) pairs
            self.generated_quantities = None

    def evaluate(self, theta):
        val, grad, _ = self.evaluate_with_info(theta)
        return val, grad

    def evaluate_with_info(self, theta):
        mu = float(np.asarray(theta, dtype=float).reshape(()))
        d = self.data
        lp = -0.5 * (LOG_2PI + 2.0 * math.log(d.prior_sd)) - 0.5 * (mu - d.prior_mean) ** 2 / d.prior_sd**2
        dmu = -(mu - d.prior_mean) / d.prior_sd**2
        n_clamped = 0

        if self.variant is ToyVariant.ORACLE:
            v, g = _normal_loglik_terms(d.y_full, mu, d.sigma)
            lp, dmu = lp + v, dmu + g
        else:
            v, g = _normal_loglik_terms(d.y_obs, mu, d.sigma)
            lp, dmu = lp + v, dmu + g

        if self.variant is ToyVariant.BSL_INDIVIDUAL:
            imputed = mu + d.sigma * self.crn.z  # (B, n-m)
            s_b = (d.observed_exceed_count + np.sum(imputed > d.c, axis=1)) / d.n
            moments = synth_moments(s_b[:, None])
            v, _, _ = continuous_synth_loglik_grads(np.array([d.s_obs]), moments)
            lp += v  # indicator summaries: piecewise constant, zero gradient
        elif self.variant is ToyVariant.BSL_CONTINUOUS:
            v, g, n_clamped = self._continuous_term(mu)
            lp, dmu = lp + v, dmu + g

        if not np.isfinite(lp):
            raise NonFiniteDensity(f"toy {self.variant.value} log density is {lp}")
        return lp, np.array([dmu]), {"n_clamped": n_clamped}

    def _relaxed_counts(self, mu):
        d = self.data
        n_mis = d.n - d.m
        p = float(toy_exceedance_prob(mu, d.sigma, d.c))
        w = self.crn.w[:, 0]
        var = n_mis * p * (1.0 - p)
        sd = math.sqrt(max(var, 0.0))
        u = n_mis * p + sd * w
        x = np.clip(u, 0.0, n_mis)
        interior = (u > 0.0) & (u < n_mis)
        return p, sd, w, x, interior

    def _continuous_term(self, mu):
        d = self.data
        n_mis = d.n - d.m
        p, sd, w, x, interior = self._relaxed_counts(mu)
        s_b = (d.observed_exceed_count + x) / d.n
        moments = synth_moments(s_b[:, None])
        val, mean_bar, cov_bar = continuous_synth_loglik_grads(np.array([d.s_obs]), moments)
        s_bar = synth_moments_vjp(s_b[:, None], moments, mean_bar, cov_bar)[:, 0]
        x_bar = s_bar / d.n
        if sd > 0.0:
            dx_dp = np.where(interior, n_mis + w * (n_mis * (1.0 - 2.0 * p)) / (2.0 * sd), 0.0)
        else:
            dx_dp = np.where(interior, float(n_mis), 0.0)
        p_bar = float(np.sum(x_bar * dx_dp))
        dp_dmu = float(std_normal_pdf((d.c - mu) / d.sigma)) / d.sigma
        return val, p_bar * dp_dmu, int(np.sum(~interior))

    def generated_quantities(self, theta, rng: RngStream) -> dict[str, float]:
        """Continuous and exact-discrete synthetic log likelihoods at theta."""
        mu = float(np.asarray(theta, dtype=float).reshape(()))
        d = self.data
        if self.variant is not ToyVariant.BSL_CONTINUOUS:
            raise ValueError("generated quantities only defined for the continuous variant")
        l_cont = self._continuous_term(mu)[0]
        p = float(toy_exceedance_prob(mu, d.sigma, d.c))
        strata = [(d.n - d.m, np.array([p, 1.0 - p]))]

        def summarize(counts):
            return (d.observed_exceed_count + counts[0][:, :1]) / d.n

        l_disc = discrete_synth_loglik(strata, summarize, np.array([d.s_obs]), self.b_disc, rng)
        return {"l_cont": l_cont, "l_disc": l_disc}


def toy_logposterior(variant: ToyVariant, data: ToyData, crn: CrnStore | None, mu: float):
    """(log posterior, gradient) of one toy variant at a scalar mean."""
    model = ToyModel(variant, data, crn)
    return model.evaluate(np.array([float(mu)]))
