"""Locating changed modules in coupled simulation workflows."""

from .table import DataTable, SchemaError

__version__ = "0.1.0"

__all__ = ["DataTable", "SchemaError", "__version__"]
