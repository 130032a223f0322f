"""Score-identity distillation of rectified-flow models on toy targets."""

__version__ = "0.1.0"
