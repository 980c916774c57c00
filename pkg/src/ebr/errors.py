"""Exception types shared across the package."""


class EbrError(Exception):
    """Base class for all package errors."""


class EmptyInput(EbrError):
    """Raised when an operation receives empty or whitespace-only input."""


class AlignmentError(EbrError):
    """Raised when paired sequences or reports do not line up."""


class UndefinedCorrelation(EbrError):
    """Raised when a rank correlation is undefined (constant input)."""


class DivergedTraining(EbrError):
    """Training produced a non-finite loss.

    Carries the epoch and step at which divergence was detected.
    """

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class InsufficientCandidates(EbrError):
    """Raised when an operation needs more candidates than were supplied."""


class ContractViolation(EbrError):
    """A caller-side precondition was violated."""


class VocabularyMismatch(EbrError):
    """Models or corpora that must share a vocabulary do not."""


class MissingReference(EbrError):
    """A reference-dependent operation was invoked without a reference."""


class MissingModel(EbrError):
    """A strategy requires a model that was not supplied."""


class InvalidConfig(EbrError):
    """A configuration value is out of its legal range."""
