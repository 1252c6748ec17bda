"""Quantized zeroth-order forward-gradient learning."""
__version__ = "0.1.0"
