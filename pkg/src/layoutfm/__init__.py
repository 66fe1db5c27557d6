"""Self-supervised foundation model workflow for analog layout automation."""

__version__ = "0.1.0"
