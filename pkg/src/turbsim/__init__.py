"""Physics-based atmospheric turbulence degradation for synthetic datasets."""

__version__ = "0.1.0"
