"""Dynamic convolution toolkit: layers, training engine, metrics and data I/O."""

__version__ = "0.1.0"
