"""Mixture-of-DoRA-experts adaptation of a frozen toy transformer, with calibration tools."""

__version__ = "0.1.0"
