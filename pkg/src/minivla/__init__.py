"""Desk-scale vision-language-action stack on a synthetic manipulation world."""

__version__ = "0.1.0"
