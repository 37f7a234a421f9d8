"""Error taxonomy shared across modules (mapped to CLI exit codes)."""


class DataError(ValueError):
    """Invalid input data: files, shapes, directory layout. CLI exit 2."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required. CLI exit 3."""
