"""modsplit: decompose trained CNN classifiers into per-class modules."""

__version__ = "0.1.0"
