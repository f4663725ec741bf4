"""Reference training and serving for the eight-class street-view building classifier."""

__version__ = "0.1.0"
