"""Mixed-precision quantized network search, retraining and bit-plane deployment."""

__version__ = "0.1.0"
