"""Verifiable plan rewards, GRPO training, task synthesis and monitored execution."""

__version__ = "0.1.0"
