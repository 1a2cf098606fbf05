"""Text-guided super-resolution of compressed low-resolution satellite images."""

from .clipfrontend import ClipFrontend, FrontendConfig, get_frontend, l2_normalize
from .datapipe import budget_table, load_manifest, prepare, read_payloads
from .errors import (
    ArgumentError,
    CaptionTransportError,
    ConfigurationError,
    DecodeError,
    DimensionError,
    FormatError,
    ManifestError,
    MissingCaptionError,
    PreparationError,
    TextRSIRError,
    TrainingError,
)
from .estimators import BicubicUpscaler, DownlinkPreparer, TextRSIRRegressor
from .evalharness import ablate, bicubic_baseline, caption_source_compare, evaluate
from .gradcheck import grad_check
from .imagecore import downsample_bicubic, jpeg_decode, jpeg_encode, psnr, ssim, upsample_bicubic
from .reconstructor import ModelConfig, TextRSIRNet, reconstruct
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "BicubicUpscaler", "CaptionTransportError", "ClipFrontend",
    "ConfigurationError", "DecodeError", "DimensionError", "DownlinkPreparer", "FormatError",
    "FrontendConfig", "ManifestError", "MissingCaptionError", "ModelConfig", "PreparationError",
    "TextRSIRError", "TextRSIRNet", "TextRSIRRegressor", "TrainConfig", "TrainingError",
    "ablate", "bicubic_baseline", "budget_table", "caption_source_compare", "downsample_bicubic",
    "evaluate", "get_frontend", "grad_check", "jpeg_decode", "jpeg_encode", "l2_normalize",
    "load_checkpoint", "load_manifest", "prepare", "psnr", "read_payloads", "reconstruct",
    "save_checkpoint", "ssim", "train", "upsample_bicubic",
]
