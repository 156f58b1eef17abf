"""Two-timescale EMT simulation with a differential-transformation micro-solver."""

__version__ = "0.1.0"
