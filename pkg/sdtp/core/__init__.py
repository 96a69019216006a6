"""Numerics, model and pruning primitives."""
