"""FDDF recaptured-image forensics at desk scale."""

__version__ = "0.1.0"
