"""Secure local cloud with automated device, system and service onboarding."""

__version__ = "0.1.0"
