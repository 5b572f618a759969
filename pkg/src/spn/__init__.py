"""Sparse prototype network for joint pedestrian action, trajectory and pose
prediction, with prototype explanations and the Top-K mono-semanticity scale."""

__version__ = "0.1.0"
