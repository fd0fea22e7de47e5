"""Retinal vessel segmentation toolkit: noisy-label synthesis, study-group
learning, and evaluation on DRIVE / CHASE_DB1."""

__version__ = "0.1.0"
