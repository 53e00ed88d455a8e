"""Concept dictionaries over 3-D object volumes, with conservative relevance
propagation and mesh-based attribution metrics."""

from .errors import ConceptVolError

__version__ = "0.1.0"

__all__ = ["ConceptVolError", "__version__"]
