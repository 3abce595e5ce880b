"""Calculus of accuracy certificates for products, quotients and compositions of models."""
