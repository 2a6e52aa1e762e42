"""Chainlet-cluster reaction-diffusion model for daily bitcoin price forecasts."""

__version__ = "0.1.0"
