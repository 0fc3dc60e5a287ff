"""Synthetic-likelihood core: common random numbers, continuous relaxations of
discrete imputation, synthetic summary moments, and the continuous
(sampling-time) and discrete (correction-time) synthetic log likelihoods.

The continuous path is differentiable; each stage ships a hand-derived
vector-Jacobian product so model log posteriors can backpropagate through the
whole pipeline without a general autodiff tape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMass, SingularAfterEscalation
from .mathcore import RngStream, mvn_logpdf_with_grads

JITTER_BASE = 1e-8
JITTER_MAX_ESCALATIONS = 6


@dataclass(frozen=True)
class CrnStore:
    """Pre-drawn standard normals shipped into the sampler as fixed data.

    ``z`` feeds individual-level imputation (one column per missing value);
    ``w`` feeds continuous relaxations (one column per relaxation draw). Both
    are drawn once before sampling and reused at every iteration and every
    leapfrog step, which makes the synthetic likelihood a deterministic
    function of the parameters.
    """

    z: np.ndarray  # (B, n_missing)
    w: np.ndarray  # (B, n_relaxation_draws)
    seed: int

    @property
    def n_replicates(self) -> int:
        return self.w.shape[0] if self.w.size else self.z.shape[0]

    @staticmethod
    def draw(n_replicates: int, n_missing: int, n_relaxation: int, seed: int) -> "CrnStore":
        if n_replicates < 2:
            raise ValueError("need at least 2 synthetic replicates")
        gen = RngStream(seed, stream_id=0).generator()
        z = gen.standard_normal((n_replicates, n_missing))
        w = gen.standard_normal((n_replicates, n_relaxation))
        return CrnStore(z=z, w=w, seed=seed)


@dataclass
class SyntheticMoments:
    """Sample mean and covariance of synthetic summaries, plus applied jitter."""

    mean: np.ndarray
    cov: np.ndarray
    jitter_applied: float = 0.0
    zero_variance_flags: np.ndarray | None = None


@dataclass(frozen=True)
class LikelihoodPair:
    """Continuous-relaxation and exact-discrete synthetic log likelihoods."""

    l_cont: float
    l_disc: float


def relax_binomial(total, p, w):
    """Clamped normal relaxation of a binomial draw.

    Returns ``clamp(total*p + sqrt(total*p*(1-p))*w, 0, total)``; smooth in
    ``p`` away from the clamp boundaries.
    """
    total = np.asarray(total, dtype=float)
    p = np.asarray(p, dtype=float)
    var = np.maximum(total * p * (1.0 - p), 0.0)
    x = total * p + np.sqrt(var) * np.asarray(w, dtype=float)
    return np.clip(x, 0.0, total)


@dataclass
class RelaxTape:
    """Intermediates of a batched sequential relaxation, for the reverse pass."""

    probs: np.ndarray        # (S, K)
    w: np.ndarray            # (S, B, K-1)
    cond: np.ndarray         # (S, K-1) conditional probabilities after clipping
    cond_interior: np.ndarray  # (S, K-1) True where 0 < p/M < 1 (clip inactive)
    mass: np.ndarray         # (S, K-1) remaining mass before each step
    r_before: np.ndarray     # (S, B, K-1) remaining total before each step
    sd: np.ndarray           # (S, B, K-1)
    u_interior: np.ndarray   # (S, B, K-1) raw value strictly inside (0, R)
    u_upper: np.ndarray      # (S, B, K-1) raw value clamped at the remaining total
    counts: np.ndarray       # (S, B, K)
    n_clamped: int = 0


def relax_multinomial_batch(totals, probs, w) -> RelaxTape:
    """Sequential conditional normal relaxation of multinomial counts.

    Vectorized over strata and replicates: ``totals`` has shape (S,), ``probs``
    (S, K), ``w`` (S, B, K-1). Category k draws a relaxed binomial from the
    remaining total and remaining mass, clamps to [0, remaining], and subtracts
    before proceeding; the final category receives the remainder, so each
    output row sums exactly to its total.
    """
    totals = np.asarray(totals, dtype=float)
    probs = np.asarray(probs, dtype=float)
    w = np.asarray(w, dtype=float)
    S, K = probs.shape
    B = w.shape[1]
    counts = np.zeros((S, B, K))
    cond = np.zeros((S, K - 1))
    cond_interior = np.zeros((S, K - 1), dtype=bool)
    mass = np.zeros((S, K - 1))
    r_before = np.zeros((S, B, K - 1))
    sd = np.zeros((S, B, K - 1))
    u_interior = np.zeros((S, B, K - 1), dtype=bool)
    u_upper = np.zeros((S, B, K - 1), dtype=bool)

    R = np.broadcast_to(totals[:, None], (S, B)).copy()
    M = np.ones(S)
    for k in range(K - 1):
        if np.any((M < 1e-300) & (np.max(R, axis=1) > 0)):
            raise DegenerateMass(f"remaining mass underflowed at category {k}")
        mass[:, k] = M
        raw_c = np.where(M > 1e-300, probs[:, k] / np.maximum(M, 1e-300), 0.0)
        cond_interior[:, k] = (raw_c > 0.0) & (raw_c < 1.0)
        c = np.clip(raw_c, 0.0, 1.0)
        cond[:, k] = c
        r_before[:, :, k] = R
        var = np.maximum(R * (c * (1.0 - c))[:, None], 0.0)
        s = np.sqrt(var)
        sd[:, :, k] = s
        u = R * c[:, None] + s * w[:, :, k]
        u_interior[:, :, k] = (u > 0.0) & (u < R)
        u_upper[:, :, k] = u >= R
        x = np.clip(u, 0.0, R)
        counts[:, :, k] = x
        R = R - x
        M = M - probs[:, k]
    counts[:, :, K - 1] = R
    n_clamped = int(np.sum(~u_interior)) + int(np.sum(~cond_interior))
    return RelaxTape(
        probs=probs, w=w, cond=cond, cond_interior=cond_interior, mass=mass,
        r_before=r_before, sd=sd, u_interior=u_interior, u_upper=u_upper,
        counts=counts, n_clamped=n_clamped,
    )


def relax_multinomial_batch_vjp(tape: RelaxTape, counts_bar: np.ndarray) -> np.ndarray:
    """Backpropagate adjoints of the relaxed counts onto the probabilities.

    Clamped coordinates use the subgradient-zero convention; an upper clamp
    still passes sensitivity to the remaining total. Returns (S, K) adjoints
    of ``probs`` summed over replicates.
    """
    probs, w = tape.probs, tape.w
    S, K = probs.shape
    probs_bar = np.zeros((S, K))
    R_bar = counts_bar[:, :, K - 1].copy()  # x_{K-1} = remaining total
    M_bar = np.zeros(S)
    for k in range(K - 2, -1, -1):
        x_bar = counts_bar[:, :, k] - R_bar
        interior = tape.u_interior[:, :, k]
        upper = tape.u_upper[:, :, k]
        u_bar = np.where(interior, x_bar, 0.0)
        R_new_bar = R_bar + np.where(upper, x_bar, 0.0)

        c = tape.cond[:, k]
        s = tape.sd[:, :, k]
        R = tape.r_before[:, :, k]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv2s = np.where(s > 0.0, 0.5 / np.where(s > 0.0, s, 1.0), 0.0)
        # u = R c + sqrt(R c (1-c)) w
        du_dR = c[:, None] + w[:, :, k] * (c * (1.0 - c))[:, None] * inv2s
        du_dc = R + w[:, :, k] * (R * (1.0 - 2.0 * c)[:, None]) * inv2s
        R_new_bar += u_bar * du_dR
        c_bar = np.sum(u_bar * du_dc, axis=1)

        m = np.maximum(tape.mass[:, k], 1e-150)  # squared below; keep it normal
        cin = tape.cond_interior[:, k]
        probs_bar[:, k] += np.where(cin, c_bar / m, 0.0)
        M_bar_step = np.where(cin, -c_bar * probs[:, k] / (m * m), 0.0)
        probs_bar[:, k] += -M_bar  # from M_{k+1} = M_k - p_k
        M_bar = M_bar + M_bar_step
        R_bar = R_new_bar
    return probs_bar


def relax_multinomial_sequential(total, probs, w) -> np.ndarray:
    """Continuous multinomial counts for one stratum and one replicate.

    ``probs`` must sum to one within 1e-10; the output sums exactly to
    ``total`` and every component lies in [0, total].
    """
    probs = np.asarray(probs, dtype=float)
    if abs(probs.sum() - 1.0) > 1e-10:
        raise ValueError(f"probs sum to {probs.sum()}, expected 1")
    if total < 0:
        raise ValueError("total must be nonnegative")
    w = np.asarray(w, dtype=float)
    if w.shape != (probs.size - 1,):
        raise ValueError(f"w has shape {w.shape}, expected ({probs.size - 1},)")
    tape = relax_multinomial_batch(
        np.array([float(total)]), probs[None, :], w[None, None, :]
    )
    return tape.counts[0, 0]


def synth_moments(summaries: np.ndarray) -> SyntheticMoments:
    """Sample mean vector and covariance (divisor B-1) of synthetic summaries.

    Diagonal jitter starts at 1e-8 times the mean diagonal and escalates by
    factors of ten until the Cholesky factorization succeeds; the applied
    jitter is recorded. Raises SingularAfterEscalation after six escalations.
    """
    summaries = np.asarray(summaries, dtype=float)
    B, D = summaries.shape
    if B < 2:
        raise ValueError("need at least 2 replicates for a covariance")
    if B < D + 2:
        warnings.warn(
            f"B={B} replicates for D={D} summaries; covariance likely unstable",
            RuntimeWarning,
            stacklevel=2,
        )
    mean = summaries.mean(axis=0)
    centered = summaries - mean
    cov = centered.T @ centered / (B - 1)
    diag = np.diag(cov)
    zero_var = diag <= 0.0
    base = JITTER_BASE * (np.trace(cov) / D)
    if base <= 0.0:
        base = 1e-12  # all summaries constant; fall back to an absolute floor
    jitter = 0.0
    for attempt in range(JITTER_MAX_ESCALATIONS + 1):
        try:
            np.linalg.cholesky(cov + jitter * np.eye(D))
            break
        except np.linalg.LinAlgError:
            jitter = base * 10.0**attempt
    else:
        raise SingularAfterEscalation(
            f"covariance singular after {JITTER_MAX_ESCALATIONS} jitter escalations"
        )
    if jitter > 0.0:
        cov = cov + jitter * np.eye(D)
    return SyntheticMoments(
        mean=mean, cov=cov, jitter_applied=jitter,
        zero_variance_flags=zero_var if zero_var.any() else None,
    )


def synth_moments_vjp(summaries, moments: SyntheticMoments, mean_bar, cov_bar) -> np.ndarray:
    """Adjoints of the raw summaries given adjoints of the sample moments.

    ``cov_bar`` must be symmetric (it is, coming from the MVN log density).
    When jitter was applied its trace-proportional dependence on the covariance
    is included.
    """
    summaries = np.asarray(summaries, dtype=float)
    B, D = summaries.shape
    cov_bar = np.asarray(cov_bar, dtype=float)
    if moments.jitter_applied > 0.0:
        # jitter = coef * trace(cov_raw); d jitter/d cov_raw = coef * I
        trace_raw = np.trace(moments.cov) - D * moments.jitter_applied
        coef = moments.jitter_applied / trace_raw if trace_raw > 0.0 else 0.0
        cov_bar = cov_bar + np.trace(cov_bar) * coef * np.eye(D)
    centered = summaries - moments.mean
    return mean_bar / B + centered @ (2.0 * cov_bar) / (B - 1)


def continuous_synth_loglik(s_obs, moments: SyntheticMoments) -> float:
    """Synthetic log likelihood of the observed summaries under the MVN fit."""
    val, _, _ = mvn_logpdf_with_grads(np.atleast_1d(s_obs), moments.mean, moments.cov)
    return val


def continuous_synth_loglik_grads(s_obs, moments: SyntheticMoments):
    """Value plus adjoints of the moment mean and covariance."""
    val, d_mean, d_cov = mvn_logpdf_with_grads(np.atleast_1d(s_obs), moments.mean, moments.cov)
    return val, d_mean, d_cov


def discrete_synth_loglik(strata, summarize, s_obs, B_disc: int, rng: RngStream) -> float:
    """Correction-time synthetic log likelihood from exact discrete sampling.

    ``strata`` is a list of (total, probs) pairs; ``summarize`` maps the list of
    (B_disc, K) count arrays to a (B_disc, D) summary matrix. Fresh multinomial
    randomness is drawn from ``rng``; this never runs inside the gradient path.
    """
    s_obs = np.atleast_1d(np.asarray(s_obs, dtype=float))
    if B_disc < s_obs.size + 2:
        warnings.warn(
            f"B_disc={B_disc} is below D+2={s_obs.size + 2}; moment estimates will be noisy",
            RuntimeWarning,
            stacklevel=2,
        )
    gen = rng.generator()
    counts = []
    for total, probs in strata:
        probs = np.asarray(probs, dtype=float)
        if total > 0:
            draw = gen.multinomial(int(total), probs / probs.sum(), size=B_disc)
        else:
            draw = np.zeros((B_disc, probs.size), dtype=np.int64)
        counts.append(draw.astype(float))
    summaries = summarize(counts)
    moments = synth_moments(summaries)
    return continuous_synth_loglik(s_obs, moments)
