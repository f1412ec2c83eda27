"""Triplet importance learning for implicit-feedback top-k recommendation."""

from tilrec.errors import (
    ConfigError,
    EmptyDatasetError,
    NumericalFault,
    ParseError,
    TilrecError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmptyDatasetError",
    "NumericalFault",
    "ParseError",
    "TilrecError",
    "__version__",
]
