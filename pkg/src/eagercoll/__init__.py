"""Partial collectives (solo/majority allreduce) and eager-SGD on a simulated network."""

__version__ = "0.1.0"
