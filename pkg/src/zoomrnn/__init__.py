"""Zoom-RNN multi-region evidence fusion for person recognition."""

from zoomrnn.errors import (
    DataError,
    InputError,
    NumericalError,
    ProtocolError,
    SchemaError,
    ZoomRnnError,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "InputError",
    "NumericalError",
    "ProtocolError",
    "SchemaError",
    "ZoomRnnError",
]
