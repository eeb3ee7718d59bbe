"""Compiler and cycle-accurate simulator for digital compute-in-memory accelerators."""

__version__ = "0.1.0"
