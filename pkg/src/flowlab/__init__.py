"""2D conditional flow matching lab with learnable source distributions."""

__version__ = "0.1.0"
