"""Error types raised across the pipeline.

Each error carries enough context (offending mode, step, sample) for the CLI
to attribute a failure to the module that produced it.
"""


class NlsKamError(Exception):
    """Base class for all pipeline errors."""

    module = "nlskam"


class SmallDivisorError(NlsKamError):
    """A divisor fell below the configured floor."""

    module = "spectral"

    def __init__(self, message, index=None, divisor=None):
        super().__init__(message)
        self.index = index
        self.divisor = divisor


class DiffeoInvalidError(NlsKamError):
    """A torus diffeomorphism violates the W^{1,inf} <= 1/2 condition."""

    module = "regularizer"


class DegenerateCoefficientError(NlsKamError):
    """A coefficient makes a square root or a division ill defined."""

    module = "regularizer"


class NotDiagonallyDominantError(NlsKamError):
    """Neumann precondition C(s0)|Psi|_{s0} <= 1/2 fails."""

    module = "opmatrix"


class ConvergenceError(NlsKamError):
    """An iteration failed to converge within its budget."""

    module = "opmatrix"


class StepRejectedError(NlsKamError):
    """A KAM step could not be carried out."""

    module = "kam"


class DivergenceError(NlsKamError):
    """The Newton residual grew on consecutive steps."""

    module = "solver"


class EmptyCantorSetError(NlsKamError):
    """No parameter sample survived the admissibility masks."""

    module = "solver"


class ConfigError(NlsKamError):
    """Configuration file failed validation."""

    module = "config"

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class StabilityViolatedError(NlsKamError):
    """A reduced eigenvalue has a nonzero real part."""

    module = "stability"


class ChainError(NlsKamError):
    """A transformation chain fails its round-trip check."""

    module = "stability"
