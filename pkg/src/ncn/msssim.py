"""Differentiable multi-scale SSIM.

Gaussian window 11x11 with sigma 1.5, five scales with the standard
weights, contrast-structure terms at the coarse scales. For small
inputs the window shrinks to the largest odd size that fits and the
number of scales drops so every scale still accommodates the window;
the scale weights are renormalized accordingly.
"""

import torch
import torch.nn.functional as F

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
SCALE_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1 = 0.01
_K2 = 0.03


def _gaussian_window(size, sigma, dtype, device):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g.outer(g)


def _ssim_terms(a, b, window):
    c = a.shape[1]
    kernel = window.expand(c, 1, *window.shape)
    mu_a = F.conv2d(a, kernel, groups=c)
    mu_b = F.conv2d(b, kernel, groups=c)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = F.conv2d(a * a, kernel, groups=c) - mu_aa
    var_b = F.conv2d(b * b, kernel, groups=c) - mu_bb
    cov = F.conv2d(a * b, kernel, groups=c) - mu_ab
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_ab + c1) / (mu_aa + mu_bb + c1)
    return (lum * cs).mean(), cs.mean()


def _plan(h, w):
    win = min(WINDOW_SIZE, h, w)
    if win % 2 == 0:
        win -= 1
    levels = 1
    size = min(h, w)
    while levels < len(SCALE_WEIGHTS) and size // 2 >= win:
        size //= 2
        levels += 1
    return win, levels


def ms_ssim(a, b):
    """Multi-scale SSIM of two (B,C,H,W) tensors with values in [0,1]."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise ValueError(f"expected (B,C,H,W), got {tuple(a.shape)}")
    win, levels = _plan(a.shape[2], a.shape[3])
    window = _gaussian_window(win, WINDOW_SIGMA, a.dtype, a.device)
    weights = torch.tensor(SCALE_WEIGHTS[:levels], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()

    result = torch.ones((), dtype=a.dtype, device=a.device)
    for lvl in range(levels):
        ssim_val, cs_val = _ssim_terms(a, b, window)
        if lvl == levels - 1:
            result = result * torch.relu(ssim_val) ** weights[lvl]
        else:
            result = result * torch.relu(cs_val) ** weights[lvl]
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    return result
