"""CNN-GRUSKIP-Transformer traffic-flow forecasting on a small numpy autodiff engine."""

__version__ = "0.1.0"
