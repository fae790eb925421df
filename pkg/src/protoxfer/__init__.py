"""Prototype-filtered cross-domain knowledge transfer.

Trains a target-domain classifier while importing supervision from a
label-noisy auxiliary domain through a Y-shaped network, early domain
alignment, and prototype-based consistency filtering.
"""

from protoxfer.errors import ConfigError, DataError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
