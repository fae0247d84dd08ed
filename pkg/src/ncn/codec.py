"""Image <-> bitstream pipeline.

encode_image pads the image, runs the transforms, entropy-codes the
hyper latent (sequential causal scan) and the latent residuals, and
packs both streams. decode_image is the single decoder entry point:
it never needs to know whether the encoder applied latent masking.

The hyper latent is coded position by position: Laplace parameters at
a position are computed from the already-coded neighborhood through
the same patch-wise routine on both sides, so their tables agree
bit-exactly.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import cdftables
from .bitstream import pack_bitstream, unpack_bitstream
from .cdftables import scale_to_level, tables_for_levels
from .errors import BitstreamError
from .model import (
    HYPER_CLIP,
    HYPER_STRIDE,
    LATENT_STRIDE,
    context_params_at,
    pad_image,
    padded_size,
    quantize,
)
from .rangecoder import RangeDecoder, RangeEncoder
from .rate import estimate_rate


@dataclass
class EncodeInfo:
    height: int
    width: int
    bits_b1: int
    bits_b2: int
    estimated_bits_b1: float
    estimated_bits_b2: float

    @property
    def total_bits(self):
        return self.bits_b1 + self.bits_b2

    @property
    def bpp(self):
        return self.total_bits / (self.height * self.width)


def _encode_hyper(model, z_hat):
    """Sequential causal coding of the quantized hyper latent."""
    params = model.context.numpy_params()
    half_k = params["half_k"]
    z = z_hat[0].detach().cpu().numpy().astype(np.float32)
    c, hh, ww = z.shape
    zp = np.pad(z, ((0, 0), (half_k, half_k), (half_k, half_k)))
    enc = RangeEncoder()
    est_bits = 0.0
    for i in range(hh):
        for j in range(ww):
            mean2, scale2 = context_params_at(params, zp, i, j)
            mu_round = np.clip(np.rint(mean2), -HYPER_CLIP, HYPER_CLIP)
            k = np.rint(z[:, i, j] - mu_round).astype(np.int64)
            tables = tables_for_levels(scale_to_level(scale2))
            cdftables.encode_into(enc, k, tables)
            est_bits += estimate_rate(k, np.maximum(scale2, cdftables.SIGMA_MIN))
    return enc.finish(), est_bits


def _decode_hyper(model, data, shape):
    """Mirror of _encode_hyper from a coded stream."""
    params = model.context.numpy_params()
    half_k = params["half_k"]
    c, hh, ww = shape
    zp = np.zeros((c, hh + 2 * half_k, ww + 2 * half_k), dtype=np.float32)
    dec = RangeDecoder(data)
    for i in range(hh):
        for j in range(ww):
            mean2, scale2 = context_params_at(params, zp, i, j)
            mu_round = np.clip(np.rint(mean2), -HYPER_CLIP, HYPER_CLIP)
            tables = tables_for_levels(scale_to_level(scale2))
            k = cdftables.decode_from(dec, tables)
            zp[:, i + half_k, j + half_k] = k + mu_round
    z = zp[:, half_k : half_k + hh, half_k : half_k + ww]
    return torch.from_numpy(np.ascontiguousarray(z)).unsqueeze(0)


@torch.no_grad()
def encode_image(model, x, lambda_id=0, alpha_fn=None):
    """Compress one image tensor (1,3,H,W) in [0,1] to container bytes.

    alpha_fn, when given, receives the padded image and the latent's
    Laplace mean and returns a mask in [0,1] used to pull latents
    toward the mean before quantization. The hyper stream is derived
    from the unmasked latent, so it is unaffected by masking.
    """
    model.eval()
    if x.dim() != 4 or x.shape[0] != 1:
        raise ValueError(f"expected a single (1,3,H,W) image, got {tuple(x.shape)}")
    h, w = int(x.shape[2]), int(x.shape[3])
    xp = pad_image(x)
    y = model.encode_latent(xp)
    z_hat, mean, scale = model.hyper_forward(y, mode="infer")

    b2, est_b2 = _encode_hyper(model, z_hat)

    if alpha_fn is not None:
        alpha = alpha_fn(xp, y, mean)
        if alpha.shape != y.shape:
            raise ValueError(f"mask shape {tuple(alpha.shape)} does not match latent {tuple(y.shape)}")
        y = y - alpha * (y - mean)
    r = quantize(y, mean, mode="infer")

    r_np = r[0].cpu().numpy().astype(np.int64).ravel()
    scale_np = scale[0].cpu().numpy().astype(np.float64).ravel()
    tables = tables_for_levels(scale_to_level(scale_np))
    b1 = cdftables.encode_symbols(r_np, tables)

    info = EncodeInfo(
        height=h,
        width=w,
        bits_b1=8 * len(b1),
        bits_b2=8 * len(b2),
        estimated_bits_b1=estimate_rate(r_np, scale_np),
        estimated_bits_b2=est_b2,
    )
    data = pack_bitstream(h, w, model.latent_channels, model.hyper_channels, lambda_id, b1, b2)
    return data, info


@torch.no_grad()
def decode_image(model, data):
    """Decompress container bytes back to an image tensor (1,3,H,W)."""
    model.eval()
    parts = unpack_bitstream(data)
    if parts.latent_channels != model.latent_channels or parts.hyper_channels != model.hyper_channels:
        raise BitstreamError(
            f"stream was coded with {parts.latent_channels}/{parts.hyper_channels} channels, "
            f"model has {model.latent_channels}/{model.hyper_channels}"
        )
    ph, pw = padded_size(parts.height, parts.width)
    z_shape = (model.hyper_channels, ph // HYPER_STRIDE, pw // HYPER_STRIDE)
    z_hat = _decode_hyper(model, parts.b2, z_shape)
    mean, scale = model.entropy_params(z_hat)

    n_sym = model.latent_channels * (ph // LATENT_STRIDE) * (pw // LATENT_STRIDE)
    scale_np = scale[0].cpu().numpy().astype(np.float64).ravel()
    tables = tables_for_levels(scale_to_level(scale_np))
    r = cdftables.decode_symbols(parts.b1, tables, n_sym)
    r_t = torch.from_numpy(r.astype(np.float32)).reshape(1, *mean.shape[1:])

    y_hat = r_t + mean
    x_hat = model.decode_latent(y_hat)
    return x_hat[:, :, : parts.height, : parts.width]
