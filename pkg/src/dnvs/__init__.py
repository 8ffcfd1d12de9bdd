"""Decoupled semantic/spatial transformer for feedforward novel view
synthesis, desk scale: synthetic scenes, tape autodiff, training, analysis."""

__version__ = "0.1.0"
