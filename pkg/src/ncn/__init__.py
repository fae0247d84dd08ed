"""Machine-oriented learned image codec.

A hyperprior autoencoder with Laplace entropy models and a real range
coder, trainable under visual, task-driven, or feature-based losses,
plus a latent-space masking branch that cuts rate for non-salient
latents without touching the decoder.
"""

from .analysis import ToyAnalysis, ToyBackbone, external_adapter, param_checksum, train_toy_analysis
from .bitstream import pack_bitstream, unpack_bitstream
from .cdftables import CdfTable, build_cdf, decode_symbols, encode_symbols, scale_to_level
from .codec import decode_image, encode_image
from .checkpoint import load_model_file, save_model_file
from .errors import BitstreamError, CapabilityError, CodecError, NumericError
from .losses import LossConfig, LossKind, LossReport, d_feature, d_hvs, task_loss, total_loss
from .masking import LsmHead, apply_mask, compute_mask, masked_encode
from .metrics import RDCurve, RDPoint, bd_quality, bd_rate, ms_ssim, psnr, weighted_ap
from .model import NcnModel, quantize
from .rate import estimate_rate, laplace_bits
from .trainer import Checkpoint, TrainPhase, TrainPlan, attach_lsmnet, detach_lsmnet, sweep, train

__version__ = "0.1.0"

__all__ = [
    "BitstreamError",
    "CapabilityError",
    "CdfTable",
    "Checkpoint",
    "CodecError",
    "LossConfig",
    "LossKind",
    "LossReport",
    "LsmHead",
    "NcnModel",
    "NumericError",
    "RDCurve",
    "RDPoint",
    "ToyAnalysis",
    "ToyBackbone",
    "TrainPhase",
    "TrainPlan",
    "apply_mask",
    "attach_lsmnet",
    "bd_quality",
    "bd_rate",
    "build_cdf",
    "compute_mask",
    "d_feature",
    "d_hvs",
    "decode_image",
    "decode_symbols",
    "detach_lsmnet",
    "encode_image",
    "encode_symbols",
    "estimate_rate",
    "external_adapter",
    "laplace_bits",
    "load_model_file",
    "masked_encode",
    "ms_ssim",
    "pack_bitstream",
    "param_checksum",
    "psnr",
    "quantize",
    "save_model_file",
    "scale_to_level",
    "sweep",
    "task_loss",
    "total_loss",
    "train",
    "train_toy_analysis",
    "unpack_bitstream",
    "weighted_ap",
]
