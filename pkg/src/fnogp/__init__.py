"""Fourier neural operators with function-valued Gaussian process uncertainty.

A numpy/scipy library that trains Fourier neural operators on synthetic PDE
data and converts them, by linearizing the final Fourier block around a
Gaussian weight belief, into function-valued Gaussian processes with lazily
evaluable means, covariances and functional samples.
"""

from .field import Field, Grid, SpectralField, fourier_interpolate, irfft, rfft

__all__ = ["Field", "Grid", "SpectralField", "rfft", "irfft", "fourier_interpolate"]

__version__ = "0.1.0"
