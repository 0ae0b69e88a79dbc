"""Dense overfit-aware weight averaging (SWAD), its baselines, and flat-minima diagnostics."""

__version__ = "0.1.0"
