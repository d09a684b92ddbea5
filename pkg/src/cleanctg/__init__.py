"""Artefact detection and reconstruction for 1 Hz fetal heart rate traces."""

__version__ = "0.1.0"
