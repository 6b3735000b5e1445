"""Frozen diffusion U-Net features with spectral FiLM modulation for hyperspectral land-cover mapping."""

from .classifier import (GeoDiffNetClassifier, GeoDiffNetFClassifier, TrainConfig, TrainReport,
                         predict_pixels, train_geodiffnet, train_geodiffnet_f)
from .data import (HsiCube, LabelMap, SpectralScaler, SynthSpec, load_cube, load_labels,
                   save_cube, save_labels, select_pseudo_rgb, synth_dataset)
from .diffusion import (DiffusionFeatureExtractor, FrozenUNet, NoiseSchedule, UNetConfig,
                        build_schedule, extract_features, forward_noise, init_frozen_unet,
                        load_unet_weights, save_unet_weights)
from .film import FilmParams, encode_spectrum, film_modulate, regress_film
from .inference import BackboneConfig, infer_scene, load_checkpoint, max_vote, save_checkpoint
from .metrics import ConfusionMatrix, aa, confusion, evaluate, kappa, mean_f1, mean_iou, oa
from .tiling import TilePlan, coverage_count, extract_patch, plan_tiles

__version__ = "0.1.0"

__all__ = [
    "GeoDiffNetClassifier", "GeoDiffNetFClassifier", "TrainConfig", "TrainReport",
    "predict_pixels", "train_geodiffnet", "train_geodiffnet_f",
    "HsiCube", "LabelMap", "SpectralScaler", "SynthSpec", "load_cube", "load_labels",
    "save_cube", "save_labels", "select_pseudo_rgb", "synth_dataset",
    "DiffusionFeatureExtractor", "FrozenUNet", "NoiseSchedule", "UNetConfig",
    "build_schedule", "extract_features", "forward_noise", "init_frozen_unet",
    "load_unet_weights", "save_unet_weights",
    "FilmParams", "encode_spectrum", "film_modulate", "regress_film",
    "BackboneConfig", "infer_scene", "load_checkpoint", "max_vote", "save_checkpoint",
    "ConfusionMatrix", "aa", "confusion", "evaluate", "kappa", "mean_f1", "mean_iou", "oa",
    "TilePlan", "coverage_count", "extract_patch", "plan_tiles",
]
