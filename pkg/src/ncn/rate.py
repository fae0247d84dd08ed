"""Laplace-model rate estimation.

Two faces of the same model: an exact float64 estimator over integer
residuals (used when reporting and when validating coded lengths), and
a differentiable torch version evaluated on noisy latents during
training.
"""

import numpy as np
import torch

from .cdftables import SIGMA_MIN, laplace_bin_mass
from .errors import NumericError

_LIKELIHOOD_FLOOR = 2.0 ** -24


def estimate_rate(residual, sigma):
    """Total bits to code integer residuals under zero-mean Laplace(sigma).

    bits = sum_i -log2(F(r_i + 0.5) - F(r_i - 0.5)) with F the Laplace
    CDF of scale sigma_i. Scales below SIGMA_MIN are rejected.
    """
    residual = np.asarray(residual)
    sigma = np.asarray(sigma, dtype=np.float64)
    if residual.shape != sigma.shape:
        raise ValueError(f"shape mismatch {residual.shape} vs {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise NumericError("non-finite scale")
    if np.any(sigma < SIGMA_MIN - 1e-9):
        raise NumericError(f"scale below lower bound {SIGMA_MIN}")
    p = laplace_bin_mass(residual.astype(np.float64), sigma)
    p = np.maximum(p, np.finfo(np.float64).tiny)
    return float(-np.log2(p).sum())


def laplace_likelihood(values, mean, scale):
    """Differentiable bin mass of (values - mean) under Laplace(scale)."""
    centered = values - mean
    upper = _laplace_cdf(centered + 0.5, scale)
    lower = _laplace_cdf(centered - 0.5, scale)
    return torch.clamp(upper - lower, min=_LIKELIHOOD_FLOOR)


def _laplace_cdf(x, scale):
    return torch.where(
        x <= 0,
        0.5 * torch.exp(x / scale),
        1.0 - 0.5 * torch.exp(-x / scale),
    )


def laplace_bits(values, mean, scale):
    """Differentiable total bits for a (noisy) latent tensor."""
    return -torch.log2(laplace_likelihood(values, mean, scale)).sum()
