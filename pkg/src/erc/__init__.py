"""Speaker-aware emotion recognition in conversation, at desk scale."""

from erc.errors import ConfigError, DataError, ErcError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "ErcError", "NumericError", "__version__"]
