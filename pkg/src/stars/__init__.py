"""Data-free ANN-to-SNN distillation with relational and tail-aware synthesis."""

__version__ = "0.1.0"
