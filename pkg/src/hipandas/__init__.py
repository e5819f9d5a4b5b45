"""Zero-shot joint pandenoising and pansharpening of hyperspectral images."""

__version__ = "0.1.0"
