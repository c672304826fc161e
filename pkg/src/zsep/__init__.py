"""Zero-shot source separation by diffusion inversion, at desk scale."""

__version__ = "0.1.0"
