"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: data/validation problems exit with 2,
numerical failures (NaN aborts) with 3.
"""


class DataError(Exception):
    """A dataset, bundle, or input file violates its contract."""


class BundleFormatError(DataError):
    """An on-disk bundle is missing, corrupt, or has an unknown schema."""


class CheckpointFormatError(DataError):
    """An on-disk tensor checkpoint is corrupt or has an unknown layout."""


class NumericalError(RuntimeError):
    """Training or inference produced non-finite values."""
