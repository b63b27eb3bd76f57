"""Battery capacity estimation from relaxation voltage and capacity history."""

from .errors import CerberusError, DataError, NumericError, ShapeError

__all__ = ["CerberusError", "DataError", "NumericError", "ShapeError", "__version__"]
__version__ = "0.1.0"
