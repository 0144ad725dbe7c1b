"""Boundary-driven exclusion processes: simulation, PDE limits, and
large-deviations rate-functional evaluation."""

__version__ = "0.1.0"
