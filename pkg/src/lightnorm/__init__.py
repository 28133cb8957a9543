"""Ambient light normalization with frozen vision-transformer feature priors."""

from .errors import ConfigurationError, InputError, NumericalError
from .network import LightNormalizer, NetworkPlan, PLAN_PRESETS, count_parameters
from .prior import (
    FeatureTriplet,
    PriorExtractor,
    extract_features,
    get_extractor,
    load_backbone,
    make_stub_extractor,
    pca_color_map,
    pca_visualize,
    stub_extract,
)
from .quality import LossConfig, lab_rmse, ms_ssim, psnr, srgb_to_lab, ssim, total_loss
from .data import (
    PairRecord,
    PatchPair,
    augment,
    index_dataset,
    load_image,
    sample_patch,
    save_image,
    synth_dataset,
)
from .tiling import TileSpec, blend_weights, sliding_infer
from .training import (
    TrainConfig,
    TrainState,
    build_state,
    fit,
    lr_at,
    load_checkpoint,
    save_checkpoint,
    train_step,
    validate,
)
from .evaluation import evaluate, run_ablation, visualize_features

__all__ = [
    "ConfigurationError",
    "InputError",
    "NumericalError",
    "LightNormalizer",
    "NetworkPlan",
    "PLAN_PRESETS",
    "count_parameters",
    "FeatureTriplet",
    "PriorExtractor",
    "extract_features",
    "get_extractor",
    "load_backbone",
    "make_stub_extractor",
    "pca_color_map",
    "pca_visualize",
    "stub_extract",
    "LossConfig",
    "lab_rmse",
    "ms_ssim",
    "psnr",
    "srgb_to_lab",
    "ssim",
    "total_loss",
    "PairRecord",
    "PatchPair",
    "augment",
    "index_dataset",
    "load_image",
    "sample_patch",
    "save_image",
    "synth_dataset",
    "TileSpec",
    "blend_weights",
    "sliding_infer",
    "TrainConfig",
    "TrainState",
    "build_state",
    "fit",
    "lr_at",
    "load_checkpoint",
    "save_checkpoint",
    "train_step",
    "validate",
    "evaluate",
    "run_ablation",
    "visualize_features",
]

__version__ = "0.1.0"
