"""Exception hierarchy shared by all dynact modules.

CLI exit-code mapping: usage errors exit 2 (argparse), DataError and its
subclasses exit 3, DivergenceError exits 4.
"""


class DynactError(Exception):
    """Base class for all dynact errors."""


class ContractViolation(DynactError):
    """An operation was called with inputs that break its preconditions."""


class LoadError(DynactError):
    """A weight or config file could not be loaded (missing tensor, bad shape,
    unparseable header)."""


class CacheOverflowError(DynactError):
    """Generation would exceed the model's maximum sequence length."""


class UndefinedCettError(DynactError):
    """CETT is undefined because the dense FFN output has zero norm."""


class DegenerateCalibrationError(DynactError):
    """Threshold search received calibration data with all-zero activations."""


class DivergenceError(DynactError):
    """A training run produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")
