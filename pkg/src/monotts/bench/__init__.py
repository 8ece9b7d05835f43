"""Synthetic data, robustness evaluation and decoder benchmarks."""
