"""Exception types shared across the toolkit."""


class SnpekitError(Exception):
    """Base class for all snpekit errors."""


class DimensionMismatch(SnpekitError):
    """Inputs disagree on parameter or feature dimensionality."""


class NonFiniteLoss(SnpekitError):
    """A forward pass produced NaN/Inf, e.g. a degenerate covariance or overflow."""


class NonFiniteOutput(SnpekitError):
    """A network forward pass produced non-finite outputs."""


class NonPositivePrecision(SnpekitError):
    """Gaussian division produced a precision matrix that is not positive definite.

    This is the documented failure mode of the analytic proposal correction:
    the correction divides by the proposal density and breaks down whenever
    the proposal is sharper than the learned conditional.
    """


class DegenerateProposal(SnpekitError):
    """A proposal assigned zero density to a point the prior supports."""


class AllZeroWeights(SnpekitError):
    """Every importance weight in a round is zero (all draws bad or off-support)."""


class ProposalStarvation(SnpekitError):
    """The guard rejected too many consecutive proposals; it has likely collapsed."""


class NoAcceptances(SnpekitError):
    """Rejection sampling accepted nothing at the requested tolerance."""


class ParticleCollapse(SnpekitError):
    """The SMC particle population degenerated (effective sample size < 2)."""


class NonConvergence(SnpekitError):
    """MCMC chains failed the split-Rhat convergence check within budget."""


class SingularF(SnpekitError):
    """The smoothness operator is rank deficient and augmentation is disabled."""


class IncompatibleRuns(SnpekitError):
    """Run directories being compared have incompatible parameter spaces."""


class ConfigError(SnpekitError):
    """An experiment config failed schema validation."""
