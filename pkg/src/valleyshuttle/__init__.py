"""Spin shuttling through a disordered valley-splitting landscape."""

__version__ = "0.1.0"
