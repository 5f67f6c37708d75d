"""Self-distillation pretraining and evaluation for multi-spectral imagery."""

__version__ = "0.1.0"
