"""Long-range message passing on discrete Fourier frequencies, with
classical Coulomb oracles for verification."""

from .backends import active_name, available_backends

__version__ = "0.1.0"

__all__ = ["__version__", "active_name", "available_backends"]
