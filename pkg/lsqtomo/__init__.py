"""lsqtomo: least-squares density-matrix tomography of harmonic and Morse oscillators."""

__version__ = "0.1.0"
