"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes; see qlower.cli.
"""


class QLowerError(Exception):
    """Base class for all qlower errors."""


class ShapeError(QLowerError):
    """Tensor rank/extent mismatch; message names the offending axes."""


class SchemaError(QLowerError):
    """Malformed model/qparams/dataset JSON; message carries a JSON path."""


class NumericError(QLowerError):
    """Non-finite values where finite ones are required, or training divergence."""


class DegenerateInputError(QLowerError):
    """Statistically empty input (e.g. batch-norm over zero elements)."""


class CalibrationRequiredError(QLowerError):
    """A quantizer was executed or lowered before receiving parameters."""

    def __init__(self, value_ids):
        self.value_ids = list(value_ids)
        super().__init__(
            "missing quantization parameters for: " + ", ".join(self.value_ids))


class EmptyDatasetError(QLowerError):
    """A calibration/run dataset contained no batches."""


class AccumulatorOverflowError(QLowerError):
    """Integer accumulation left the INT32 range; message names the node."""
