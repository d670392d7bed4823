"""Cloth-changing person re-identification with cloth-agnostic and clothes
text prompts, two-stream alignment and clothes-feature disentanglement."""

__version__ = "0.1.0"
