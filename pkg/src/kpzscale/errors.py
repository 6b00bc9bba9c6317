"""Exception hierarchy shared by the simulation and analysis modules.

Every exception carries an ``exit_code`` so the command line runner can map
failure classes onto stable process exit statuses.
"""


class KpzScaleError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    def to_record(self):
        return {"error": type(self).__name__, "message": str(self), "exit_code": self.exit_code}


class ParameterError(KpzScaleError, ValueError):
    """Invalid physical or numerical parameter."""

    exit_code = 2


class InvalidLatticeError(ParameterError):
    """Lattice too small or field of the wrong shape."""


class ConfigError(ParameterError):
    """Configuration document failed validation.

    ``errors`` holds the complete list of problems found.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))

    def to_record(self):
        record = super().to_record()
        record["errors"] = self.errors
        return record


class BlowUpError(KpzScaleError, FloatingPointError):
    """Non-finite values appeared during time integration."""

    exit_code = 3

    def __init__(self, message, step=None, trajectory=None):
        self.step = step
        self.trajectory = trajectory
        super().__init__(message)

    def to_record(self):
        record = super().to_record()
        record.update(step=self.step, trajectory=self.trajectory)
        return record


class BelowThresholdError(ParameterError):
    """Requested condensate fixed point does not exist (P <= P_th)."""


class InsufficientDataError(KpzScaleError):
    """Not enough populated bins, sizes or samples for the requested estimate."""

    exit_code = 4


class FitFailure(KpzScaleError, RuntimeError):
    """A fit did not converge. ``best`` holds the best iterate found."""

    exit_code = 5

    def __init__(self, message, best=None, diagnostics=None):
        self.best = best
        self.diagnostics = diagnostics or {}
        super().__init__(message)

    def to_record(self):
        record = super().to_record()
        record["diagnostics"] = {k: str(v) for k, v in self.diagnostics.items()}
        return record


class DegenerateExclusionError(FitFailure):
    """Outlier exclusion removed every data point."""
