"""Latent control barrier certificates: world model, barrier and policy training, and verification."""

__version__ = "0.1.0"
