"""Saliency-driven dynamic token pruning at desk scale."""
