"""Gaussian-mixture reverse kernels for a conditional OU diffusion."""
