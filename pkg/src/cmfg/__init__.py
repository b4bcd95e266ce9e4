"""Solver and verification harness for a Cournot mean field game with absorption."""

__version__ = "0.1.0"
