"""Simulation and numerical certification toolkit for the multiplicative stochastic heat equation on a circle."""

__version__ = "0.1.0"
TOOL_NAME = "shedecay"
