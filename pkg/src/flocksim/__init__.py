"""Simulation and bound-checking toolkit for stochastic Cucker-Smale flocking."""

__version__ = "0.1.0"
