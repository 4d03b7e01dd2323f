"""Exception hierarchy shared by all modules."""


class SmsnLmmError(Exception):
    """Base class for package errors."""


class ValidationError(SmsnLmmError, ValueError):
    """Input data or configuration violates a documented invariant."""


class InvalidGrid(ValidationError):
    """Observation times are incompatible with the dependence structure."""


class DesignRankError(ValidationError):
    """Stacked fixed-effects design is rank deficient."""


class UnequalLengths(ValidationError):
    """Subjects have differing numbers of observations where equality is required."""


class MomentUndefined(SmsnLmmError, ValueError):
    """A mixing-law moment does not exist for the given parameters."""


class NonStationary(SmsnLmmError, ValueError):
    """Autoregressive coefficients lie outside the stationarity region."""


class SingularDispersion(SmsnLmmError, ArithmeticError):
    """A dispersion matrix is not numerically positive definite."""


class NonPSD(SingularDispersion):
    """An updated scale matrix has a clearly negative eigenvalue."""


class QuadratureFailure(SmsnLmmError, ArithmeticError):
    """Adaptive quadrature did not reach the requested tolerance."""


class NumericalUnderflow(SmsnLmmError, ArithmeticError):
    """A log-domain evaluation still produced a non-finite value."""


class OptimFailure(SmsnLmmError, RuntimeError):
    """A numerical conditional-maximization step could not improve its objective."""


class NotNested(SmsnLmmError, ValueError):
    """Restricted model attains a larger likelihood than the full model."""


class SingularInformation(SmsnLmmError, ArithmeticError):
    """Observed information matrix cannot be inverted."""
