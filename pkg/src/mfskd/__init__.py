"""Data-free distillation of a teacher ensemble into a multi-header student."""

__version__ = "0.1.0"
