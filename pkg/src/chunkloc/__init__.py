"""Toolkit for compressing sentence embeddings with a sparsified variational
encoder-decoder and localizing chunk information inside embedding regions."""

__version__ = "0.1.0"
