"""Space-mean stochastic reaction-diffusion equations: simulation, adjoints and optimal harvesting."""

__version__ = "0.1.0"
