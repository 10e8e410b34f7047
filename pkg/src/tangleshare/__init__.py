"""Data marketplace over a DAG ledger with encrypted authenticated streams."""
from .errors import TangleShareError

__version__ = "0.1.0"
__all__ = ["TangleShareError", "__version__"]
