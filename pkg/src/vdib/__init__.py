"""Spiking encoder / ANN decoder trained with a variational directed information bottleneck."""

__version__ = "0.1.0"
