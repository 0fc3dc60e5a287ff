"""Exception hierarchy shared across the package."""


class SynlikError(Exception):
    """Base class for all package errors."""


class NonPositiveDefinite(SynlikError):
    """Covariance matrix has no Cholesky factorization."""


class SingularAfterEscalation(NonPositiveDefinite):
    """Covariance still not positive definite after maximum jitter escalation."""


class UnsupportedDimension(SynlikError):
    """Requested dimension exceeds the embedded direction-number tables."""


class NonFiniteDensity(SynlikError):
    """Log density evaluated to NaN or -inf; the sampler treats this as a divergence."""


class DegenerateMass(SynlikError):
    """Remaining probability mass underflowed while counts remain to assign."""


class AllZeroLikelihood(SynlikError):
    """Every covariate pattern assigns zero likelihood to the observed stratum."""


class InsufficientDraws(SynlikError):
    """Not enough draws (or chains) for the requested diagnostic."""


class InsufficientTail(SynlikError):
    """Too few tail exceedances to fit a generalized Pareto distribution."""


class NonFiniteWeight(SynlikError):
    """Importance weight computation received a non-finite likelihood pair."""


class AllDivergent(SynlikError):
    """More than half of the post-warmup draws diverged."""


class SchemaError(SynlikError):
    """Network file violates the documented schema."""


class ConsistencyError(SynlikError):
    """Aggregate counts disagree with individual-level tallies."""


class NotIpdStudy(SynlikError):
    """Masking requested on a study without individual patient data."""


class MissingCovariates(SynlikError):
    """Full-IPD likelihood requested on rows without covariate values."""


class EmptyGrid(SynlikError):
    """Marginalized likelihood requested without integration points."""


class DegenerateSummaryStructure(SynlikError):
    """Two subgroup summaries for the same comparison induce the same partition
    of the integration grid, making the synthetic covariance exactly singular."""


class MissingBundle(SynlikError):
    """Output directory does not contain a run bundle."""
