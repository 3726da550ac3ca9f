"""Exception hierarchy shared by every module."""


class ZoomRnnError(Exception):
    pass


class InputError(ZoomRnnError, ValueError):
    """Rejected input: wrong shapes, non-one-hot targets, bad permutations."""


class DataError(ZoomRnnError):
    pass


class SchemaError(DataError):
    """Manifest content is malformed or internally inconsistent."""


class ProtocolError(DataError):
    """Fold protocol violated (identity missing from a fold, fold mismatch)."""


class NumericalError(ZoomRnnError):
    """Training diverged (NaN/Inf loss) or a gradient check failed."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
