"""ACFormer forecasting toolkit on a small numpy-backed autodiff core."""

__version__ = "0.1.0"
