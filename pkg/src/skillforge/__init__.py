"""Skill learning on a contrastively grounded latent sphere, at desk scale."""

__version__ = "0.1.0"
