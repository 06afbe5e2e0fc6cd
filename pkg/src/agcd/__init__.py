"""Agent-guided cross-modal decoding for toy weather forecasters."""

__version__ = "0.1.0"
