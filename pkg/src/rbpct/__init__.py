"""Training-free CT reconstruction: MBIR, deep image prior and RBP-DIP."""

__version__ = "0.1.0"
