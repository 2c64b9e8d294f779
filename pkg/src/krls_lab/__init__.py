"""Keyword-focused offline RL for response generation, at desk scale."""

__version__ = "0.1.0"
