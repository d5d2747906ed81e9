"""Simulation, calibration and analysis for a SPAD line-array single-photon spectrometer."""

__version__ = "0.1.0"
