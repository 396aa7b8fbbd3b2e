"""Forecasting partially observed multi-agent systems with a temporal-anchor
graph encoder and a latent ODE generative model."""

__version__ = "0.1.0"
