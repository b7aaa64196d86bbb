"""Toy-scale multi-reconstruction detector for GAN and diffusion generated faces.

An image is inverted and regenerated through a GAN (encoder + generator) and a
DDIM diffusion model; the image and both reconstructions feed a ternary
classifier over {real, GAN, DM}.
"""
from .labels import Family

__version__ = "0.1.0"

__all__ = ["Family", "__version__"]
