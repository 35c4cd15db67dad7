"""Joint denoising and HDR fusion of RAW exposure brackets."""

__version__ = "0.1.0"
