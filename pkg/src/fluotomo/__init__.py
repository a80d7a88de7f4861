"""Fluorescent optical tomography by L^p / L^infinity PDE-constrained optimisation."""

__version__ = "0.1.0"
