"""Lattice-correlator contention MAC for WiMAX-class smart-grid uplinks."""

__version__ = "0.1.0"
