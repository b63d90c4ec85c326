"""Adversarial attacks against paired face-recognition and anti-spoofing models."""

__version__ = "0.1.0"
