"""Exception hierarchy shared across the package."""


class TopoCompError(Exception):
    """Base class for all package errors."""


class DimensionError(TopoCompError, ValueError):
    """An array has the wrong shape for the operation it was passed to."""


class ContractError(TopoCompError, ValueError):
    """A documented precondition of an operation was violated."""


class ParameterError(TopoCompError, ValueError):
    """A hyperparameter is outside the range an operation supports."""


class ParseError(TopoCompError, ValueError):
    """An input file could not be parsed."""


class ValidationError(TopoCompError, ValueError):
    """Parsed input is well-formed but semantically inconsistent."""


class DatasetTooSmallError(TopoCompError, ValueError):
    """Too few clean windows remain to form a train/val/test split."""


class CompatibilityError(TopoCompError, ValueError):
    """A model, artifact and dataset do not fit together."""


class FormatError(TopoCompError, ValueError):
    """A binary file has a bad magic, version or digest."""


class TrainingDiverged(TopoCompError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, history=None, params=None, last_finite_epoch=None):
        super().__init__(message)
        self.history = history or []
        self.params = params
        self.last_finite_epoch = last_finite_epoch
