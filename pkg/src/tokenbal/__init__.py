"""Token load balancing on graphs: matching and diffusion models."""

__version__ = "0.1.0"
