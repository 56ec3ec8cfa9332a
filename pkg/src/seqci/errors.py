"""Exception types shared across the package."""


class SeqciError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(SeqciError, ValueError):
    """Vector lengths of an observation or parameter set are inconsistent."""


class ZeroDenominator(SeqciError, ArithmeticError):
    """The normalizing integral of a test function is zero while the
    numerator is positive (observed point outside the model's support)."""


class UnsupportedModel(SeqciError, TypeError):
    """The requested operation is not available for this conditional model
    (e.g. exact integration on a model without enumerable support)."""


class SamplerFailure(SeqciError, RuntimeError):
    """A conditional model failed to produce draws."""


class SingularMatrix(SeqciError, ValueError):
    """A matrix that must be invertible to working precision is not."""


class RankDeficient(SeqciError, ValueError):
    """A regression design matrix does not have full column rank."""


class SupportMismatch(SeqciError, ValueError):
    """Two discrete distributions do not share the same support."""


class InsufficientReplications(SeqciError, ValueError):
    """Too few replications for the requested summary to be trustworthy."""


class ConfigError(SeqciError, ValueError):
    """A configuration file or dictionary failed schema validation."""
