"""Two-stage urban change forecasting from single satellite images."""

__version__ = "0.1.0"
