"""Arithmetic garbled circuits over residue number systems for quantized CNN inference."""

from .errors import ReDashError
from .rns import RnsBase, make_base, parse_base

__version__ = "0.1.0"

__all__ = ["ReDashError", "RnsBase", "make_base", "parse_base", "__version__"]
