"""Pilotless CV-QKD reception: simulation, Bayesian phase/timing recovery and key rates."""

__version__ = "0.1.0"
