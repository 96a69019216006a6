"""Validation models for configs and reports."""
