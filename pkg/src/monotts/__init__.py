"""Toy seq2seq acoustic model with Gaussian monotonic attention and block-sparse decoding."""
__version__ = "0.1.0"
