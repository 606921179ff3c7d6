"""Solar-altitude illumination prior and a desk-scale conditioned diffusion model."""

__version__ = "0.1.0"
