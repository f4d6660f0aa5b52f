"""syncosim: positive-sequence (RMS) dynamic simulation of grids mixing
synchronous machines, synchronous condensers and grid-following inverters."""

__version__ = "0.1.0"
