"""Conformer full-reference IQA and blind noisy-student distillation."""

__version__ = "0.1.0"
