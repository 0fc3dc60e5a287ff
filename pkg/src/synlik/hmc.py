"""Gradient-based MCMC engine: leapfrog integration, dual-averaging step-size
adaptation, diagonal mass-matrix estimation, multi-chain execution, and
split-R-hat / rank-normalized ESS convergence diagnostics.

The sampler is jittered static HMC: each iteration draws a trajectory length
uniformly from [1, max_leapfrog_steps] and accepts or rejects the endpoint by
a Metropolis step, which preserves detailed balance without tree building.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllDivergent, InsufficientDraws, NonFiniteDensity
from .grad import LogDensityModel, evaluate
from .mathcore import RngStream, std_normal_quantile

DIVERGENCE_ENERGY = 1000.0

# Hoffman-Gelman dual averaging defaults
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass
class HmcConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_sampling: int = 1000
    target_accept: float = 0.8
    max_leapfrog_steps: int = 64
    init_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_warmup < 1 or self.n_sampling < 1:
            raise ValueError("n_warmup and n_sampling must be at least 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")


@dataclass
class ChainDraws:
    """Post-warmup output of one chain; warmup draws are never retained."""

    draws: np.ndarray            # (n_sampling, dim)
    accept_stats: np.ndarray     # per-draw acceptance probability
    divergence_flags: np.ndarray  # per-draw bool
    stepsize: float
    mass_diag: np.ndarray        # mass matrix diagonal (inverse posterior scale^2)
    warmup_accept_mean: float = float("nan")  # mean accept prob, 2nd half of warmup
    generated: dict[str, np.ndarray] = field(default_factory=dict)


def leapfrog(theta, momentum, stepsize, n_steps, model: LogDensityModel, mass_diag):
    """Symplectic leapfrog integration of the Hamiltonian dynamics.

    Returns (theta', momentum', energy_error); the energy error is +inf when
    the density or gradient becomes non-finite along the trajectory, which the
    sampler treats as a divergence.
    """
    if stepsize <= 0:
        raise ValueError("stepsize must be positive")
    mass_diag = np.asarray(mass_diag, dtype=float)
    if np.any(mass_diag <= 0):
        raise ValueError("mass_diag must be strictly positive")
    theta = np.asarray(theta, dtype=float).copy()
    p = np.asarray(momentum, dtype=float).copy()
    try:
        val, grad = evaluate(model, theta)
    except NonFiniteDensity:
        return theta, p, float("inf")
    h0 = -val + 0.5 * float(np.sum(p * p / mass_diag))
    for _ in range(n_steps):
        p += 0.5 * stepsize * grad
        theta += stepsize * p / mass_diag
        try:
            val, grad = evaluate(model, theta)
        except NonFiniteDensity:
            return theta, p, float("inf")
        p += 0.5 * stepsize * grad
    h1 = -val + 0.5 * float(np.sum(p * p / mass_diag))
    if not math.isfinite(h1):
        return theta, p, float("inf")
    return theta, p, h1 - h0


def _accept_prob(energy_error: float) -> float:
    """Metropolis acceptance min(1, exp(-dE)), safe against overflow."""
    if not math.isfinite(energy_error):
        return 0.0
    return math.exp(min(0.0, -energy_error))


class _DualAveraging:
    def __init__(self, initial_stepsize, target_accept):
        self.mu = math.log(10.0 * initial_stepsize)
        self.target = target_accept
        self.log_eps = math.log(initial_stepsize)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        eta = 1.0 / (self.t + _DA_T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(self.t) / _DA_GAMMA * self.h_bar
        weight = self.t ** (-_DA_KAPPA)
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def adapted_stepsize(self):
        return math.exp(self.log_eps_bar)


def _find_initial_stepsize(model, theta, mass_diag, gen):
    """Double or halve a unit step until the one-step acceptance crosses 0.5."""
    eps = 1.0
    p = np.sqrt(mass_diag) * gen.standard_normal(theta.size)
    _, _, delta = leapfrog(theta, p, eps, 1, model, mass_diag)
    accept = _accept_prob(delta)
    direction = 1.0 if accept > 0.5 else -1.0
    for _ in range(50):
        eps *= 2.0**direction
        _, _, delta = leapfrog(theta, p, eps, 1, model, mass_diag)
        accept = _accept_prob(delta)
        if (direction == 1.0 and accept <= 0.5) or (direction == -1.0 and accept >= 0.5):
            break
    return eps


def _initial_point(model, config, gen):
    for _ in range(100):
        theta = gen.uniform(-config.init_radius, config.init_radius, size=model.dim)
        try:
            evaluate(model, theta)
            return theta
        except NonFiniteDensity:
            continue
    raise NonFiniteDensity("could not find a finite initial point in 100 tries")


def _run_single_chain(model, config: HmcConfig, chain_id: int) -> ChainDraws:
    gen = RngStream(config.seed, 2 * chain_id).generator()
    dim = model.dim
    mass_diag = np.ones(dim)
    theta = _initial_point(model, config, gen)
    val, _ = evaluate(model, theta)

    eps = _find_initial_stepsize(model, theta, mass_diag, gen)
    da = _DualAveraging(eps, config.target_accept)

    # Warmup layout: dual averaging runs throughout; draws from the second half
    # of the pre-freeze window feed the mass estimate, and the remaining 40% of
    # warmup re-adapts the step size under the new metric so the frozen step
    # size actually delivers the target acceptance.
    n_warmup = config.n_warmup
    mass_end = int(0.6 * n_warmup) if n_warmup >= 20 else n_warmup
    mass_start = mass_end // 2
    mass_window = []

    def one_iteration(theta, eps):
        n_steps = int(gen.integers(1, config.max_leapfrog_steps + 1))
        p = np.sqrt(mass_diag) * gen.standard_normal(dim)
        theta_new, _, delta = leapfrog(theta, p, eps, n_steps, model, mass_diag)
        divergent = not math.isfinite(delta) or abs(delta) > DIVERGENCE_ENERGY
        accept_prob = 0.0 if divergent else _accept_prob(delta)
        if not divergent and gen.uniform() < accept_prob:
            theta = theta_new
        return theta, accept_prob, divergent

    warmup_accepts = np.empty(n_warmup)
    for it in range(n_warmup):
        theta, accept_prob, _ = one_iteration(theta, eps)
        warmup_accepts[it] = accept_prob
        eps = da.update(accept_prob)
        if mass_start <= it < mass_end:
            mass_window.append(theta.copy())
        if it == mass_end - 1 and mass_end < n_warmup and len(mass_window) >= 5:
            var = np.var(np.asarray(mass_window), axis=0, ddof=1)
            n_est = len(mass_window)
            var_reg = (n_est / (n_est + 5.0)) * var + (5.0 / (n_est + 5.0)) * 1.0
            mass_diag = 1.0 / np.maximum(var_reg, 1e-12)
            # re-adapt the step size under the new metric for the rest of warmup
            da = _DualAveraging(max(da.adapted_stepsize, 1e-10), config.target_accept)
            eps = math.exp(da.log_eps)

    eps = max(da.adapted_stepsize, 1e-10)

    draws = np.empty((config.n_sampling, dim))
    accept_stats = np.empty(config.n_sampling)
    divergences = np.zeros(config.n_sampling, dtype=bool)
    for it in range(config.n_sampling):
        theta, accept_prob, divergent = one_iteration(theta, eps)
        draws[it] = theta
        accept_stats[it] = accept_prob
        divergences[it] = divergent

    generated: dict[str, np.ndarray] = {}
    gq = getattr(model, "generated_quantities", None)
    if callable(gq):
        gq_stream = RngStream(config.seed, 2 * chain_id + 1)
        rows = [gq(draws[i], RngStream(gq_stream.seed, (gq_stream.stream_id << 32) + i))
                for i in range(config.n_sampling)]
        for key in rows[0]:
            generated[key] = np.array([r[key] for r in rows])

    return ChainDraws(
        draws=draws, accept_stats=accept_stats, divergence_flags=divergences,
        stepsize=eps, mass_diag=mass_diag.copy(),
        warmup_accept_mean=float(np.mean(warmup_accepts[n_warmup // 2:])),
        generated=generated,
    )


def _chain_worker(args):
    model, config, chain_id = args
    return _run_single_chain(model, config, chain_id)


def run_chains(model: LogDensityModel, config: HmcConfig, threads: int = 1) -> list[ChainDraws]:
    """Run all chains, enforce the divergence budget, and return their draws.

    Chains are independent: chain c uses the reproducible stream (seed, 2c) for
    its dynamics and (seed, 2c+1) for correction-time randomness, so results do
    not depend on execution order or on ``threads`` (worker processes when >1).
    """
    if model.dim < 1:
        raise ValueError("model dimension must be at least 1")
    if threads > 1 and config.n_chains > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=min(threads, config.n_chains)) as ex:
            chains = list(ex.map(_chain_worker, [(model, config, c) for c in range(config.n_chains)]))
    else:
        chains = [_run_single_chain(model, config, c) for c in range(config.n_chains)]
    total = sum(c.divergence_flags.size for c in chains)
    n_div = sum(int(c.divergence_flags.sum()) for c in chains)
    if n_div > 0.5 * total:
        raise AllDivergent(
            f"{n_div}/{total} post-warmup draws diverged; the target is likely pathological"
        )
    return chains


def _split_chains(chains_param: np.ndarray) -> np.ndarray:
    c, n = chains_param.shape
    half = n // 2
    return np.concatenate([chains_param[:, :half], chains_param[:, n - half:]], axis=0)


def _extract(chains, index) -> np.ndarray:
    rows = []
    for ch in chains:
        arr = ch.draws if isinstance(ch, ChainDraws) else np.asarray(ch, dtype=float)
        rows.append(arr[:, index] if arr.ndim == 2 else arr)
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise ValueError("chains must have equal lengths")
    return np.asarray(rows)

def rhat(chains, index: int = 0) -> float:
    """Split-chain potential scale reduction factor.

    Constant identical chains report 1.0 (zero-variance case); chains stuck at
    different constants report +inf.
    """
    x = _extract(chains, index)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise InsufficientDraws("rhat needs at least 2 chains of at least 4 draws")
    x = _split_chains(x)
    c, n = x.shape
    means = x.mean(axis=1)
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    b = n * float(np.var(means, ddof=1))
    if w == 0.0:
        return 1.0 if b == 0.0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def zero_variance(chains, index: int = 0) -> bool:
    """True when every chain is constant at the same value (R-hat degenerate)."""
    x = _extract(chains, index)
    return bool(np.all(x == x.flat[0]))


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    from scipy.stats import rankdata

    flat = rankdata(x.ravel(), method="average")
    z = std_normal_quantile((flat - 0.375) / (x.size + 0.25))
    return z.reshape(x.shape)


def ess(chains, index: int = 0) -> float:
    """Rank-normalized bulk effective sample size (split chains, Geyer
    monotone initial positive sequence)."""
    x = _extract(chains, index)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise InsufficientDraws("ess needs at least 2 chains of at least 4 draws")
    x = _split_chains(x)
    if np.all(x == x.flat[0]):
        return float("nan")
    z = _rank_normalize(x)
    c, n = z.shape
    acov = np.empty((c, n))
    for m in range(c):
        d = z[m] - z[m].mean()
        full = np.correlate(d, d, mode="full")[n - 1:]
        acov[m] = full / n
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n + np.var(z.mean(axis=1), ddof=1) if c > 1 else w
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    # Geyer: sum consecutive pairs while positive, enforce monotone decrease
    tau = 1.0
    prev = float("inf")
    t = 1
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        tau += 2.0 * pair
        prev = pair
        t += 2
    return float(c * n / tau)
