"""Core compression networks.

An autoencoder maps images to a latent at 1/16 spatial resolution; a
second autoencoder (the hyper branch) compresses that latent further
to 1/64 and predicts per-element Laplace parameters (mean, scale) for
it. A causal context model predicts Laplace parameters for the hyper
latent itself from already-scanned positions.

All transforms use stride-2 5x5 convolutions with ReLU nonlinearities.
Scales are produced as SIGMA_MIN + softplus(raw), so the lower bound
holds by construction and gradients never die.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cdftables import RESIDUAL_MAX, SIGMA_MIN
from .errors import NumericError

LATENT_STRIDE = 16
HYPER_STRIDE = 64
PAD_MULTIPLE = 64

# hyper latents are clipped to +/-(2^14 - 1) at quantization so that the
# residual against a clipped predicted mean always fits the escape code
HYPER_CLIP = (1 << 14) - 1


def _conv(in_ch, out_ch, kernel=5, stride=2):
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


def _tconv(in_ch, out_ch, kernel=5, stride=2):
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, output_padding=stride - 1
    )


class MaskedConv2d(nn.Conv2d):
    """Conv whose kernel is zeroed at the center and all later raster positions.

    The output at a spatial position therefore depends only on strictly
    earlier positions in raster scan order.
    """

    def __init__(self, in_ch, out_ch, kernel=5):
        super().__init__(in_ch, out_ch, kernel, padding=kernel // 2)
        mask = torch.ones(kernel, kernel)
        mask[kernel // 2, kernel // 2 :] = 0
        mask[kernel // 2 + 1 :, :] = 0
        self.register_buffer("mask", mask[None, None])

    def forward(self, x):
        return F.conv2d(x, self.weight * self.mask, self.bias, padding=self.padding)


class ContextModel(nn.Module):
    """Causal Laplace-parameter predictor for the quantized hyper latent."""

    def __init__(self, channels, hidden=None):
        super().__init__()
        hidden = hidden or channels
        self.masked = MaskedConv2d(channels, hidden, kernel=5)
        self.mix1 = nn.Conv2d(hidden, hidden, 1)
        self.mix2 = nn.Conv2d(hidden, 2 * channels, 1)
        self.channels = channels

    def _head(self, h):
        h = self.mix2(F.relu(self.mix1(F.relu(h))))
        mean, raw_scale = h.chunk(2, dim=1)
        scale = SIGMA_MIN + F.softplus(raw_scale)
        return mean, scale

    def forward(self, z_hat):
        """Parallel pass over a full tensor (training / analysis)."""
        return self._head(self.masked(z_hat))

    def numpy_params(self):
        """Export weights for the sequential per-position evaluation.

        Only the visible (unmasked) kernel taps are kept, as a flat
        matrix, so partially decoded tensors give exactly the same dot
        products as fully known ones.
        """
        k = self.masked.kernel_size[0]
        mask = self.masked.mask[0, 0].bool()
        taps = torch.nonzero(mask)  # (V, 2) kernel coordinates
        w = self.masked.weight[:, :, taps[:, 0], taps[:, 1]]  # (hidden, C, V)
        return {
            "taps": taps.numpy(),
            "w_masked": w.detach().numpy().astype(np.float32),
            "b_masked": self.masked.bias.detach().numpy().astype(np.float32),
            "w1": self.mix1.weight.detach().numpy()[:, :, 0, 0].astype(np.float32),
            "b1": self.mix1.bias.detach().numpy().astype(np.float32),
            "w2": self.mix2.weight.detach().numpy()[:, :, 0, 0].astype(np.float32),
            "b2": self.mix2.bias.detach().numpy().astype(np.float32),
            "half_k": k // 2,
        }


def context_params_at(params, z_padded, row, col):
    """Laplace params for one spatial position from its causal neighborhood.

    z_padded is the hyper latent (C, H + 2p, W + 2p) zero-padded by
    half_k on each side; (row, col) index the unpadded grid. Future
    positions are never read, so encoder (full tensor) and decoder
    (partially filled tensor) compute bit-identical results.
    """
    taps = params["taps"]
    patch = z_padded[:, taps[:, 0] + row, taps[:, 1] + col]  # (C, V)
    h = np.einsum("ocv,cv->o", params["w_masked"], patch) + params["b_masked"]
    np.maximum(h, 0.0, out=h)
    h = params["w1"] @ h + params["b1"]
    np.maximum(h, 0.0, out=h)
    h = params["w2"] @ h + params["b2"]
    n = len(h) // 2
    mean = h[:n]
    scale = SIGMA_MIN + np.logaddexp(0.0, h[n:])
    return mean, scale


class NcnModel(nn.Module):
    """Autoencoder + hyper branch + context model.

    Channel widths are configurable; checkpoints are self-describing,
    so any width round-trips.
    """

    def __init__(self, latent_channels=192, hyper_channels=192, context_hidden=None):
        super().__init__()
        n, n_h = latent_channels, hyper_channels
        self.latent_channels = n
        self.hyper_channels = n_h
        relu = nn.ReLU(inplace=True)
        self.g_enc = nn.Sequential(
            _conv(3, n), relu, _conv(n, n), relu, _conv(n, n), relu, _conv(n, n)
        )
        self.g_dec = nn.Sequential(
            _tconv(n, n), relu, _tconv(n, n), relu, _tconv(n, n), relu, _tconv(n, 3)
        )
        self.h_enc = nn.Sequential(_conv(n, n_h), relu, _conv(n_h, n_h))
        self.h_dec = nn.Sequential(_tconv(n_h, n_h), relu, _tconv(n_h, 2 * n))
        self.context = ContextModel(n_h, context_hidden)

    @property
    def arch(self):
        return {
            "latent_channels": self.latent_channels,
            "hyper_channels": self.hyper_channels,
            "context_hidden": self.context.mix1.weight.shape[0],
        }

    def encode_latent(self, x):
        """Image (B,3,H,W) in [0,1], H and W multiples of 64 -> latent."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B,3,H,W) image tensor, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NumericError("non-finite image input")
        if x.shape[2] % PAD_MULTIPLE or x.shape[3] % PAD_MULTIPLE:
            raise ValueError(f"image dims must be multiples of {PAD_MULTIPLE}, got {tuple(x.shape[2:])}")
        return self.g_enc(x)

    def decode_latent(self, y_hat):
        """Latent -> image, clamped to [0,1]."""
        if y_hat.dim() != 4 or y_hat.shape[1] != self.latent_channels:
            raise ValueError(f"expected (B,{self.latent_channels},h,w) latent, got {tuple(y_hat.shape)}")
        if not torch.isfinite(y_hat).all():
            raise NumericError("non-finite latent")
        return self.g_dec(y_hat).clamp(0.0, 1.0)

    def decode_latent_raw(self, y_hat):
        """Unclamped synthesis output, used inside training losses."""
        return self.g_dec(y_hat)

    def entropy_params(self, z_hat):
        """Laplace (mean, scale) for the latent, given the quantized hyper latent.

        Encoder and decoder both call this on identical z_hat, so the
        resulting coding tables agree.
        """
        params = self.h_dec(z_hat)
        mean, raw_scale = params.chunk(2, dim=1)
        return mean, SIGMA_MIN + F.softplus(raw_scale)

    def hyper_forward(self, y, mode="infer"):
        """Hyper branch: returns (z_hat, mean, scale) for the latent y.

        In train mode z_hat carries additive uniform noise, in infer
        mode it is rounded to integers (and clipped for codability).
        """
        if not torch.isfinite(y).all():
            raise NumericError("non-finite latent")
        z = self.h_enc(y)
        z_hat = quantize_plain(z, mode)
        mean, scale = self.entropy_params(z_hat)
        return z_hat, mean, scale

    def context_forward(self, z_hat):
        return self.context(z_hat)


def quantize_plain(z, mode):
    """Round to integers (infer) or add uniform noise (train)."""
    if mode == "train":
        return z + torch.empty_like(z).uniform_(-0.5, 0.5)
    if mode == "infer":
        return torch.round(z).clamp(-HYPER_CLIP, HYPER_CLIP)
    raise ValueError(f"unknown quantization mode {mode!r}")


def quantize(y, mean, mode="infer"):
    """Residual quantization against the predicted mean.

    infer: integer residual r = round(y - mean), reconstruct as r + mean.
    train: the additive-noise surrogate y + U(-0.5, 0.5); mean unused.
    """
    if y.shape != mean.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(mean.shape)}")
    if mode == "train":
        return y + torch.empty_like(y).uniform_(-0.5, 0.5)
    if mode == "infer":
        return torch.round(y - mean).clamp(-RESIDUAL_MAX, RESIDUAL_MAX)
    raise ValueError(f"unknown quantization mode {mode!r}")


def pad_image(x):
    """Reflect-pad (B,C,H,W) on the right/bottom to multiples of 64."""
    h, w = x.shape[2], x.shape[3]
    ph = (-h) % PAD_MULTIPLE
    pw = (-w) % PAD_MULTIPLE
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if (ph < h and pw < w) else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def padded_size(h, w):
    return (math.ceil(h / PAD_MULTIPLE) * PAD_MULTIPLE, math.ceil(w / PAD_MULTIPLE) * PAD_MULTIPLE)
