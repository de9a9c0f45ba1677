"""Concordance-of-teachers pseudo-labelling for lidar point-cloud sequences."""

__version__ = "0.1.0"
