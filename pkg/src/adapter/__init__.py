"""Cross-domain few-shot learning with bidirectional cross-attention transformers."""

__version__ = "0.1.0"
