"""Test-time self-supervised fine-tuning of super-resolution networks."""

__version__ = "0.1.0"
