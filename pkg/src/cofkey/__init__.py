"""Self-supervised key-signature and tonality estimation on the circle of fifths."""

__version__ = "0.1.0"
