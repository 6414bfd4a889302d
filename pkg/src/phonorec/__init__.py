"""Phonological property recognition from sign-language skeleton sequences."""

from .phonology import PhonologicalLabel, PropertyKind, Taxonomy, builtin_taxonomy

__version__ = "0.1.0"

__all__ = ["PhonologicalLabel", "PropertyKind", "Taxonomy", "builtin_taxonomy", "__version__"]
