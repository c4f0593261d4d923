"""Image copy detection with asymmetric norm-ratio similarity."""

__version__ = "0.1.0"
