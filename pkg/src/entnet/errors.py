"""Exception types shared across the simulator."""


class EntnetError(Exception):
    """Base class for all package errors."""


class ConfigError(EntnetError):
    """Invalid or inconsistent configuration (unknown keys, bad presets, ...)."""


class ContractViolation(EntnetError):
    """A documented precondition was violated (unsorted input, length mismatch, ...)."""


class OutOfRange(EntnetError):
    """A value left the representable picosecond integer range."""


class InsufficientData(EntnetError):
    """Not enough samples to produce a meaningful estimate."""


class ResourceLimit(EntnetError):
    """Requested simulation exceeds the desk-scale event budget."""


class EmptyOverlap(EntnetError):
    """Two batched streams share no common epoch."""


class NoPeakError(EntnetError):
    """No statistically significant peak above the histogram baseline."""


class FitConvergenceError(EntnetError):
    """A nonlinear least-squares fit failed to converge."""


class UndefinedValue(EntnetError):
    """A ratio or rate is undefined for the given inputs (zero totals, empty sidebands)."""


class CannotEstimate(EntnetError):
    """Offset estimation is impossible because a correlation peak is missing."""


class DecodeError(EntnetError):
    """A bit cell could not be decoded. Carries the failing cell index."""

    def __init__(self, message, cell_index=None):
        super().__init__(message)
        self.cell_index = cell_index


class NoLockError(EntnetError):
    """Clock recovery found no usable start sequences."""


class AuthenticationFailure(EntnetError):
    """Challenge-response verification failed; no key material is released."""


class ReplayRejection(EntnetError):
    """A consumed challenge-response pair was presented again."""


class LoopUnstable(EntnetError):
    """The pointing feedback loop diverged. Carries the time of divergence."""

    def __init__(self, message, t_s=None):
        super().__init__(message)
        self.t_s = t_s


class InvalidTelemetry(EntnetError):
    """Telemetry samples violate basic sanity constraints (e.g. non-positive sum)."""


class StageFailure(EntnetError):
    """A bring-up stage failed; later stages are not executed."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
