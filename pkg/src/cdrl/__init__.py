"""Cooperative diffusion recovery likelihood at desk scale."""

__version__ = "0.1.0"
