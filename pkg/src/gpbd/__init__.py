"""Generalized position-based dynamics."""
