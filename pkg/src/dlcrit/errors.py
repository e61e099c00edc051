"""Exception types raised across the package."""


class DlcritError(Exception):
    """Base class for all package errors."""


class DimensionError(DlcritError, ValueError):
    """Operand shapes are inconsistent."""


class InvalidInputError(DlcritError, ValueError):
    """An argument is outside the operation's domain (non-finite, bad count, ...)."""


class InvalidSpectrumError(InvalidInputError):
    """Requested eigenvalues are not strictly positive and distinct."""


class SizeError(DlcritError, ValueError):
    """A dense object would exceed the configured size cap."""


class InfeasibleSubsetError(DlcritError, ValueError):
    """An eigenvector subset is larger than the network bottleneck."""


class StageError(DlcritError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
