"""Active binaural source separation on procedural grid worlds."""

__version__ = "0.1.0"
