"""Latent-space soft masking.

A parallel branch derives a per-element mask alpha in [0,1] from
stride-16 backbone features of the image and pulls latents toward the
hyperprior mean before quantization:

    y'[i] = y[i] - alpha[i] * (y[i] - mean[i])

At alpha = 1 the residual becomes exactly zero and the element is
coded with the largest available bin probability; at alpha = 0 the
latent is untouched. The decoder never sees the mask: the bitstream
stays decodable by the unmodified decoder, and the hyper stream (read
from the unmasked latent) is byte-identical to the unmasked encode.
"""

import torch
from torch import nn

from .codec import encode_image
from .errors import CapabilityError

FEATURE_STAGE = "s16"


class LsmHead(nn.Module):
    """1x1 projection + sigmoid mapping backbone features to the mask."""

    def __init__(self, feature_channels, latent_channels, init_bias=-4.0):
        super().__init__()
        self.proj = nn.Conv2d(feature_channels, latent_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.constant_(self.proj.bias, init_bias)

    def forward(self, features):
        return torch.sigmoid(self.proj(features))


def compute_mask(x, backbone, head, stage=FEATURE_STAGE):
    """Mask tensor for image x from the backbone's stride-16 features."""
    if stage not in getattr(backbone, "stages", {}):
        raise CapabilityError(
            f"analysis backbone does not expose stage {stage!r}; masking unavailable"
        )
    features = backbone.features(x, stage)
    alpha = head(features)
    expected = (x.shape[2] // 16, x.shape[3] // 16)
    if alpha.shape[2:] != torch.Size(expected):
        raise ValueError(
            f"mask spatial shape {tuple(alpha.shape[2:])} does not match latent grid {expected}"
        )
    return alpha


def apply_mask(y, mean, alpha):
    """Soft-shift latents toward the predicted mean."""
    if y.shape != mean.shape or y.shape != alpha.shape:
        raise ValueError(
            f"shape mismatch: latent {tuple(y.shape)}, mean {tuple(mean.shape)}, "
            f"mask {tuple(alpha.shape)}"
        )
    return y - alpha * (y - mean)


def masked_encode(model, x, backbone, head, lambda_id=0, stage=FEATURE_STAGE):
    """Encode with latent masking; output decodes with the plain decoder."""

    def alpha_fn(xp, y, mean):
        alpha = compute_mask(xp, backbone, head, stage=stage)
        if alpha.shape[1] != y.shape[1]:
            raise ValueError(
                f"mask has {alpha.shape[1]} channels, latent has {y.shape[1]}"
            )
        return alpha

    return encode_image(model, x, lambda_id=lambda_id, alpha_fn=alpha_fn)
