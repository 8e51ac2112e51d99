"""Desk-scale neural-codec text-to-speech with language-model integration."""

__version__ = "0.1.0"
