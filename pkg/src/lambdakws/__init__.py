"""Keyword spotting with lambda layers on numpy."""
from .errors import (
    CheckpointError,
    ConfigurationError,
    DecodeError,
    DimensionError,
    GraphError,
    IngestionError,
    KwsError,
    NumericError,
)

__version__ = "0.1.0"
