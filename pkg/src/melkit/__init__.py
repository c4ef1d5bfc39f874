"""Splitting-integral toolkit for autonomous Hamiltonian perturbations."""

__version__ = "0.1.0"
