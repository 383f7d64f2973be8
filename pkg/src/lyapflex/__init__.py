"""Lyapunov spectra of conservative Anosov maps of the torus."""
__version__ = "0.1.0"
