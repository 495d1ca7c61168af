"""Exception and warning types shared across the package."""


class BrwlabError(Exception):
    """Base class for all package-specific errors."""


class DivergentGreen(BrwlabError):
    """Green function at lambda=0 requested for a recurrent walk."""


class InconsistentDiagnostic(BrwlabError):
    """Analytic recurrence rule and numeric refinement trend disagree."""


class FitUnstable(BrwlabError):
    """Least-squares asymptote fit residual exceeds tolerance."""


class SupercriticalInput(BrwlabError):
    """Steady-state constant requested at or above the critical strength."""


class NoRoot(BrwlabError):
    """Eigenvalue equation has no positive root for the given strength.

    ``boundary`` is True when the strength sits exactly at the threshold,
    where the root degenerates to lambda = 0.
    """

    def __init__(self, message, boundary=False):
        super().__init__(message)
        self.boundary = boundary


class NoConvergence(BrwlabError):
    """Power iteration failed to converge within the iteration budget."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SourceOutsideBox(BrwlabError):
    """A perturbation source site falls outside the lattice box."""


class UnstableStep(BrwlabError):
    """Time stepping produced values negative beyond tolerance."""


class RangeViolation(BrwlabError):
    """Generating function left the admissible interval [0, 1]."""


class PopulationExplosion(BrwlabError):
    """Particle count exceeded the configured simulation cap."""


class ParseError(BrwlabError):
    """Scenario file could not be parsed; carries line/column info."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}" + (f", col {column}" if column else "") + f": {message}"
        super().__init__(message)
        self.line = line
        self.column = column


class ValidationError(BrwlabError):
    """Scenario value violates a precondition of the owning operation."""


class MissingOutput(BrwlabError):
    """Plot view references an output absent from the manifest."""


class QuadratureResolutionWarning(UserWarning):
    """Estimated quadrature error exceeds the configured tolerance."""


class TruncationWarning(UserWarning):
    """Boundary mass loss suggests the lattice box is too small."""


class HeavyTailWarning(UserWarning):
    """Monte Carlo confidence interval is unreliably wide."""


class LowConfidenceWarning(UserWarning):
    """Too few nonzero samples back the requested estimate."""
