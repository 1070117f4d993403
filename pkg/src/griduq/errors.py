"""Exception types shared across the package."""


class GridUQError(Exception):
    """Base class for all griduq errors."""


class DimensionError(GridUQError, ValueError):
    """Tensor or grid shapes violate an operation's contract."""


class ContractError(GridUQError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(GridUQError, ValueError):
    """On-disk bytes do not match the expected binary or text format."""


class CalibrationError(GridUQError, ValueError):
    """Conformal calibration cannot produce the requested quantile."""


class TrainingError(GridUQError, RuntimeError):
    """Training aborted, for example on a non-finite loss."""
