"""Gaussian-splatting SLAM with a Top-K rendered semantic feature field."""
