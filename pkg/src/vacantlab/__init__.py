"""Simulation workbench for random-walk and random-interlacement vacant sets."""

__version__ = "0.1.0"
