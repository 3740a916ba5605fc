"""Hyperspectral destriping with a 3D denoising diffusion model."""

__version__ = "0.1.0"
