"""Desk-scale split-learning simulator and privacy toolkit for conditional
diffusion fine-tuning: gradient-free split training, LDP timestep
calibration, inversion attacks, and comparison defenses."""

__version__ = "0.1.0"
