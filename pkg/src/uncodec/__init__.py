"""Uncertainty-aware learned video codec with ensemble-based decoders."""

from .adversarial import FgsmConfig, fgsm_perturb, fgsm_training_step
from .coding import (
    Bitstream,
    BitstreamError,
    FactorizedEntropyModel,
    entropy_decode,
    entropy_encode,
    estimate_bits,
    linear_noise_bound,
    perturb_quantized,
    quantize_infer,
    quantize_train,
)
from .config import Config, ConfigError
from .ensemble import EnsembleDecoder, EnsemblePrediction, mixture_mean, mixture_variance
from .frames import (
    Frame,
    GopStructure,
    VideoSequence,
    load_sequence,
    make_gop,
    moving_shapes_clip,
    random_crop_pair,
    save_sequence,
)
from .losses import LossReport, ensemble_aware_loss, kth_smallest_index, rd_loss
from .motion import MotionEstimator, bilinear_warp, motion_mse_loss
from .pipeline import (
    CodecConfig,
    CodecModel,
    PFrameResult,
    SequenceBitstream,
    decode_sequence,
    encode_sequence,
    load_checkpoint,
    parameter_report,
    pframe_forward,
    save_checkpoint,
)
from .training import ClipDataset, TrainingDiverged, ablate, train

__version__ = "0.1.0"

__all__ = [
    "Bitstream",
    "BitstreamError",
    "ClipDataset",
    "CodecConfig",
    "CodecModel",
    "Config",
    "ConfigError",
    "EnsembleDecoder",
    "EnsemblePrediction",
    "FactorizedEntropyModel",
    "FgsmConfig",
    "Frame",
    "GopStructure",
    "LossReport",
    "MotionEstimator",
    "PFrameResult",
    "SequenceBitstream",
    "VideoSequence",
    "TrainingDiverged",
    "ablate",
    "bilinear_warp",
    "decode_sequence",
    "encode_sequence",
    "ensemble_aware_loss",
    "entropy_decode",
    "entropy_encode",
    "estimate_bits",
    "fgsm_perturb",
    "fgsm_training_step",
    "kth_smallest_index",
    "linear_noise_bound",
    "load_checkpoint",
    "load_sequence",
    "make_gop",
    "mixture_mean",
    "mixture_variance",
    "motion_mse_loss",
    "moving_shapes_clip",
    "parameter_report",
    "perturb_quantized",
    "pframe_forward",
    "quantize_infer",
    "quantize_train",
    "random_crop_pair",
    "rd_loss",
    "save_checkpoint",
    "save_sequence",
    "train",
]
