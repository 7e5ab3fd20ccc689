"""Covariant feature detector trained from transformation covariance constraints."""

__version__ = "0.1.0"
