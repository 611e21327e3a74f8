"""Prompt-driven camera noise synthesis."""

__version__ = "0.1.0"
