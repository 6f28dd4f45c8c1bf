"""Inverse process-structure calibration with Potts-model simulators."""

__version__ = "0.1.0"
