"""Desk-scale simulation and scaling analysis for 2D KPZ physics in driven condensates."""

__version__ = "0.1.0"
