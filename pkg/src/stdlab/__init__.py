"""Single-trajectory distillation on analytic Gaussian-mixture teachers."""

__version__ = "0.1.0"
