"""Automated S1-S2 inducibility studies on labeled cardiac tissue meshes."""

__version__ = "0.1.0"
