"""Dynamic score-matching distillation of one-step generators at desk scale."""

__version__ = "0.1.0"
