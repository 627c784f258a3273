"""Exception types shared across the solvers."""


class KernelFlowError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(KernelFlowError):
    """Operands do not live on a common (sample, time) index space."""


class FactorizationFailure(KernelFlowError):
    """A covariance could not be factorized even at the jitter ceiling.

    Usually indicates a badly conditioned kernel, e.g. a diverged
    fixed-point iterate.
    """


class NonFiniteValue(KernelFlowError):
    """A trajectory or field blew up (NaN/inf); reduce dt or gamma0."""


class ZeroNorm(KernelFlowError):
    """Alignment requested for a matrix with vanishing Frobenius norm."""


class InsufficientSamples(KernelFlowError):
    """Kernel estimation needs at least two Monte-Carlo samples."""


class SingularResolvent(KernelFlowError):
    """(I - gamma0^2 C D) is not invertible; reduce dt or gamma0."""


class SingularSystem(KernelFlowError):
    """A ridge system could not be solved."""


class QuadratureUnderflow(KernelFlowError):
    """Gaussian moment requested with inconsistent second moments."""


class MissingCheckpoint(KernelFlowError):
    """A training log lacks the requested checkpoint time."""


class MalformedCsv(KernelFlowError):
    """CSV input could not be parsed into samples/targets."""


class DimensionMismatch(KernelFlowError):
    """Inputs and targets disagree on the number of samples/features."""


class NonPsdGram(KernelFlowError):
    """A supplied input gram has an eigenvalue below -1e-10."""


class ConfigError(KernelFlowError):
    """Experiment configuration failed validation."""
