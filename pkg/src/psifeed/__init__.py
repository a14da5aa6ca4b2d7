"""Mobility-overlap feed ranking over private set intersection cardinality."""

from psifeed.errors import ErrorCode, InputError, ProtocolError

__version__ = "0.1.0"

__all__ = ["ErrorCode", "InputError", "ProtocolError", "__version__"]
