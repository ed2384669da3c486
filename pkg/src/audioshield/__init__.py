"""Desk-scale workbench for robust audio classification and its adversarial evaluation."""

__version__ = "0.1.0"
