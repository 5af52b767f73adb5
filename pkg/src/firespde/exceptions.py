"""Exception hierarchy shared by every module of the package."""


class FireSpdeError(Exception):
    """Base class for all package errors."""


class DegenerateGeometryError(FireSpdeError, ValueError):
    """Input locations or triangles do not span a 2-D region."""


class OutOfDomainError(FireSpdeError, ValueError):
    """A target location lies outside the triangulated domain."""


class ParameterError(FireSpdeError, ValueError):
    """A model parameter is outside its admissible range."""


class AssemblyError(FireSpdeError, ArithmeticError):
    """A matrix assembled from parameters contains non-finite entries."""


class NotPositiveDefiniteError(FireSpdeError, ArithmeticError):
    """A precision matrix could not be Cholesky factorized."""


class SizeError(FireSpdeError, ValueError):
    """A dense computation was requested above its configured size cap."""


class DataIntegrityError(FireSpdeError, ValueError):
    """Observed data violate a structural invariant of the panel."""


class ChainAbortError(FireSpdeError, RuntimeError):
    """An MCMC chain hit a non-finite state and was stopped."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class ValidationError(FireSpdeError, ValueError):
    """Predictive distribution values fail basic CDF checks."""


class ConfigError(FireSpdeError, ValueError):
    """A run configuration file is malformed or references missing paths."""


class DependencyError(FireSpdeError, RuntimeError):
    """A pipeline step was run before the step producing its inputs."""

    def __init__(self, missing, required_step):
        super().__init__(f"missing {missing}; run `{required_step}` first")
        self.missing = missing
        self.required_step = required_step
