"""Identification of uncertain diffusion coefficients from stochastic observations."""
