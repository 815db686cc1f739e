"""Synthetic survey respondents: panels, prompts, simulated answers and distribution metrics."""

__version__ = "0.1.0"
