"""Particle simulation and Bayesian calibration of a non-local proliferation model."""

__version__ = "0.1.0"
