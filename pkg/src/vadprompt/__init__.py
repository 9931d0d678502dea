"""Prompt-driven video anomaly detection with a frozen vision-language model."""

__version__ = "0.1.0"
