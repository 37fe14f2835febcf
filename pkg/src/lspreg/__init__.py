"""Local structure preserving (LSP) regularization for robust MLP classifiers."""

__version__ = "0.1.0"
