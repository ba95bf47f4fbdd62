"""Safe decoupled guidance diffusion: cost-limit conditioned trajectory planning."""

__version__ = '0.1.0'
