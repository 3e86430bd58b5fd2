"""Lightweight feature fusion network for single-image super-resolution."""
