"""Building instance classification: footprints, street-level imagery, decision fusion, maps."""

__version__ = "0.1.0"
