"""CLI module for pcdlib."""

from .main import main, run

__all__ = ["main", "run"]
