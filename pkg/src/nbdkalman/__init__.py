"""Nearly-block-diagonal approximate Kalman filters and smoothers."""

__version__ = "0.1.0"
