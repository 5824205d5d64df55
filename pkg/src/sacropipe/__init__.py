"""Anatomy-aware sacroiliitis classification on synthetic pelvic radiographs."""

__version__ = "0.1.0"
