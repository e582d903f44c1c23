"""Offline preprocessing: raw dialogue corpora into the annotation schema."""

__version__ = "0.1.0"
