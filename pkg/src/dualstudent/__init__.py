"""Desk-scale data-free model extraction: dual students, a forward-difference
baseline, gradient-fidelity measurement and transfer attacks."""

__version__ = "0.1.0"
