"""Multi-group accuracy, calibration and decision auditing over finite domains."""

__version__ = "0.1.0"
