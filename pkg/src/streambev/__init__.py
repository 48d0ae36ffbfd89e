"""Continuous-time BEV occupancy forecasting from asynchronous sensor streams."""

from streambev.autodiff import GridTensor, Tape

__version__ = "0.1.0"

__all__ = ["GridTensor", "Tape", "__version__"]
