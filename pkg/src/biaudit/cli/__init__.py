"""Command-line orchestration: synthetic corpus generation, training,
evaluation, attacks, and report assembly."""

from .main import main

__all__ = ["main"]
