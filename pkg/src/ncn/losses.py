"""Training objectives.

Three interchangeable distortion terms, assembled with the rate into
the Lagrangian objective D + lambda * R (rate normalized to bits per
pixel so lambda is resolution independent):

  * visual: MSE + 0.1 * (1 - MS-SSIM)
  * task-driven: the frozen analysis network's own loss on the decoded
    image, which requires annotations
  * feature-based: sum of squared errors between backbone feature maps
    of the original and the decoded image, which requires none

When the task or feature term is active, no visual regularizer is
added.
"""

from dataclasses import dataclass
from enum import Enum

import torch

from .errors import NumericError
from .msssim import ms_ssim


class LossKind(str, Enum):
    HVS = "hvs"
    TASK = "task"
    FEATURE = "feature"


DEFAULT_FEATURE_STAGE = "p4"


@dataclass
class LossConfig:
    kind: LossKind
    lam: float
    ssim_weight: float = 0.1
    feature_stage: str = DEFAULT_FEATURE_STAGE

    def __post_init__(self):
        self.kind = LossKind(self.kind)
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass
class RateReport:
    """Differentiable rate terms, in bits, plus the normalizer."""

    latent_bits: torch.Tensor
    hyper_bits: torch.Tensor
    num_pixels: int


@dataclass
class LossReport:
    distortion: torch.Tensor
    rate_latent_bits: torch.Tensor
    rate_hyper_bits: torch.Tensor
    total: torch.Tensor

    def floats(self):
        return {
            "distortion": float(self.distortion.detach()),
            "rate_latent_bits": float(self.rate_latent_bits.detach()),
            "rate_hyper_bits": float(self.rate_hyper_bits.detach()),
            "total": float(self.total.detach()),
        }


def d_hvs(x, x_hat, ssim_weight=0.1):
    """MSE plus weighted MS-SSIM dissimilarity (1 - MS-SSIM)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = torch.mean((x - x_hat) ** 2)
    return mse + ssim_weight * (1.0 - ms_ssim(x, x_hat))


def d_feature(x, x_hat, backbone, stage=DEFAULT_FEATURE_STAGE):
    """SSE between backbone features of x and x_hat.

    The clean-image features act as a fixed target: gradients flow only
    through the decoded branch. Not normalized by element count; lambda
    absorbs the scale.
    """
    ref = backbone.features(x, stage).detach()
    deg = backbone.features(x_hat, stage)
    return torch.sum((ref - deg) ** 2)


def task_loss(x_hat, ground_truth, analysis):
    """The frozen analysis network's training loss on decoded images."""
    if ground_truth is None:
        raise ValueError("task loss requires ground-truth annotations")
    return analysis.loss(x_hat, ground_truth)


def total_loss(x, x_hat, rates, cfg, analysis=None, ground_truth=None):
    """Assemble the Lagrangian objective for one batch.

    rates must cover BOTH streams (latent and hyper). Rate is
    normalized per pixel inside the loss. Raises NumericError naming
    the offending component if anything is non-finite.
    """
    if cfg.kind is LossKind.HVS:
        distortion = d_hvs(x, x_hat, cfg.ssim_weight)
    elif cfg.kind is LossKind.TASK:
        if analysis is None:
            raise ValueError("task loss requires an analysis adapter")
        distortion = task_loss(x_hat, ground_truth, analysis)
    else:
        if analysis is None:
            raise ValueError("feature loss requires an analysis adapter")
        distortion = d_feature(x, x_hat, analysis, cfg.feature_stage)

    bpp = (rates.latent_bits + rates.hyper_bits) / rates.num_pixels
    total = distortion + cfg.lam * bpp
    for name, value in (
        ("distortion", distortion),
        ("rate_latent", rates.latent_bits),
        ("rate_hyper", rates.hyper_bits),
        ("total", total),
    ):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"loss component {name!r} is non-finite")
    return LossReport(
        distortion=distortion,
        rate_latent_bits=rates.latent_bits,
        rate_hyper_bits=rates.hyper_bits,
        total=total,
    )
