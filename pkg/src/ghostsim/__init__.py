"""Simulation of thermal-light ghost imaging and HBT photon correlations."""

__version__ = "0.1.0"
