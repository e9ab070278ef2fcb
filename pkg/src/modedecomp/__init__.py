"""Trunk/branch error decomposition and mode-loss analysis for DeepONets."""

__version__ = "0.1.0"
