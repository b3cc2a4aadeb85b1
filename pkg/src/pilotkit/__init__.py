"""Pilot-job runtime for many-task workloads."""

__version__ = "0.1.0"
