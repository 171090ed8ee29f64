"""Testbed for attribute inference against extracted text classifiers."""

__version__ = "0.1.0"
