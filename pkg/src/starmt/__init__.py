"""Source-free adaptation of a tiny one-stage video detector to degraded video."""

__version__ = "0.1.0"
