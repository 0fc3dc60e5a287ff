"""Deterministic numerical primitives: normal special functions, multivariate
normal log density, Sobol low-discrepancy points, and reproducible RNG streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp_special

from .errors import NonPositiveDefinite, UnsupportedDimension

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RngStream:
    """Descriptor for a reproducible, independent random stream.

    Identical (seed, stream_id) pairs reproduce identical draw sequences
    bit-for-bit; distinct stream_ids give statistically independent streams.
    The descriptor is immutable; each consumer materializes its own generator.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Materialize a fresh Philox-backed generator for this stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))


def std_normal_cdf(x):
    """Standard normal CDF, accurate to well below 1e-12 absolute error.

    Accepts scalars or arrays; saturates cleanly to 0/1 in the far tails.
    """
    return sp_special.ndtr(x)


def std_normal_pdf(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def std_normal_quantile(p):
    """Inverse standard normal CDF."""
    return sp_special.ndtri(p)


def mvn_logpdf(x, mean, cov) -> float:
    """Log density of a multivariate normal at ``x``.

    Raises NonPositiveDefinite when ``cov`` has no Cholesky factorization.
    Jitter escalation for near-singular sample covariances lives with the
    synthetic-moment builder, not here.
    """
    val, _, _ = mvn_logpdf_with_grads(x, mean, cov)
    return val


def mvn_logpdf_with_grads(x, mean, cov):
    """MVN log density plus its gradients with respect to mean and covariance.

    Returns ``(value, d_mean, d_cov)``; the gradient with respect to ``x`` is
    ``-d_mean``. ``d_cov`` is symmetric.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = x.size
    if mean.size != d or cov.shape != (d, d):
        raise ValueError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite("covariance is not positive definite") from exc
    r = x - mean
    # alpha = cov^{-1} r via two triangular solves
    z = np.linalg.solve(chol, r)
    alpha = np.linalg.solve(chol.T, z)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    val = -0.5 * (d * LOG_2PI + logdet + r @ alpha)
    cov_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(d)))
    d_mean = alpha
    d_cov = 0.5 * (np.outer(alpha, alpha) - cov_inv)
    return float(val), d_mean, d_cov


# Sobol direction numbers (primitive polynomial degree s, coefficients a,
# initial m values) for dimensions 2..16; dimension 1 is the van der Corput
# sequence in base 2. Standard Joe-Kuo style table.
_SOBOL_TABLE = (
    # (s, a, (m_1, ..., m_s))
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
    (4, 4, (1, 3, 5, 13)),
    (5, 2, (1, 1, 5, 5, 17)),
    (5, 4, (1, 1, 5, 5, 5)),
    (5, 7, (1, 1, 7, 11, 19)),
    (5, 11, (1, 1, 5, 1, 1)),
    (5, 13, (1, 1, 1, 3, 11)),
    (5, 14, (1, 3, 5, 5, 31)),
    (6, 1, (1, 3, 3, 9, 7, 49)),
    (6, 13, (1, 1, 1, 15, 21, 21)),
    (6, 16, (1, 3, 1, 13, 27, 49)),
)

SOBOL_MAX_DIM = 1 + len(_SOBOL_TABLE)
_SOBOL_BITS = 32


def _direction_vectors(dim_index: int) -> np.ndarray:
    """32-bit direction integers for one coordinate (0-based dimension index)."""
    v = np.zeros(_SOBOL_BITS, dtype=np.uint64)
    if dim_index == 0:
        for i in range(_SOBOL_BITS):
            v[i] = 1 << (_SOBOL_BITS - 1 - i)
        return v
    s, a, m_init = _SOBOL_TABLE[dim_index - 1]
    m = list(m_init)
    for i in range(s, _SOBOL_BITS):
        new = m[i - s] ^ (m[i - s] << s)
        for j in range(1, s):
            if (a >> (s - 1 - j)) & 1:
                new ^= m[i - j] << j
        m.append(new)
    for i in range(_SOBOL_BITS):
        v[i] = m[i] << (_SOBOL_BITS - 1 - i)
    return v


def sobol_points(dim: int, n: int) -> np.ndarray:
    """First ``n`` points of the standard Sobol sequence in [0,1)^dim.

    Gray-code construction over direction numbers embedded as static tables;
    deterministic, starts at the origin. Powers of two give balanced designs.
    """
    if dim < 1 or dim > SOBOL_MAX_DIM:
        raise UnsupportedDimension(f"sobol_points supports 1..{SOBOL_MAX_DIM} dims, got {dim}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    out = np.zeros((n, dim), dtype=float)
    if n == 0:
        return out
    vs = [_direction_vectors(j) for j in range(dim)]
    state = np.zeros(dim, dtype=np.uint64)
    scale = float(1 << _SOBOL_BITS)
    for i in range(1, n):
        c = (i & -i).bit_length() - 1  # index of lowest set bit of i
        for j in range(dim):
            state[j] ^= vs[j][c]
        out[i] = state / scale
    return out


def log1pexp(x):
    """Numerically stable log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    """Numerically stable log of the logistic function."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return sp_special.expit(x)
