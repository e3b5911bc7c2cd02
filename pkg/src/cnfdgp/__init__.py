"""Deep Gaussian processes with a convolutional normalizing-flow posterior."""

__version__ = "0.1.0"
