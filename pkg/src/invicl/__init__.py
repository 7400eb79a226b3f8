"""Permutation-invariant in-context learning on synthetic regression."""

__version__ = "0.1.0"

from .schemes import PEScheme, Scheme

__all__ = ["Scheme", "PEScheme", "__version__"]
