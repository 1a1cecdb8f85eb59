"""Numerical laboratory for multi-resolvent chains of Wigner matrices."""
