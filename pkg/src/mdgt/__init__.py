"""Desk-scale multi-domain image translation and domain generalization toolkit."""

__version__ = "0.1.0"
