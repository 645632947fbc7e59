"""drive4d: a desk-scale 4D occupancy + language + planning pipeline."""

__version__ = "0.1.0"
