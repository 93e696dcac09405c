"""Federated patch-transformer forecasting simulator."""

__version__ = "0.1.0"
