"""Desk-scale lab for clean-label poisoning attacks and filtering defenses
in the transfer-learning setting."""

from .attacks import CraftConfig, PoisonSet, attack_success, craft_bp, craft_fc, craft_gm, project_linf
from .datasets import Dataset, DatasetView, PoisonTask, load_image_batch, select_poison_slots, synth_dataset
from .defense import (
    Centroid,
    CharacteristicVector,
    DistanceConfig,
    FilterReport,
    assign_real_labels,
    characteristic_vector,
    class_centroids,
    cosine_distance,
    cv_distance,
    export_distance_histogram,
    filter_dataset,
    spectral_filter_baseline,
)
from .layers import (
    DownstreamHead,
    FeatureExtractor,
    build_extractor,
    build_head,
    capture_bn_inputs,
    extract_features,
)
from .tensor import ComputeGraph, Tensor, backward, finite_difference_grad, no_grad, op_forward
from .training import TrainConfig, evaluate_accuracy, pretrain_extractor, transfer_finetune

__all__ = [
    "CraftConfig", "PoisonSet", "attack_success", "craft_bp", "craft_fc", "craft_gm",
    "project_linf", "Dataset", "DatasetView", "PoisonTask", "load_image_batch",
    "select_poison_slots", "synth_dataset", "Centroid", "CharacteristicVector",
    "DistanceConfig", "FilterReport", "assign_real_labels", "characteristic_vector",
    "class_centroids", "cosine_distance", "cv_distance", "export_distance_histogram",
    "filter_dataset", "spectral_filter_baseline", "DownstreamHead", "FeatureExtractor",
    "build_extractor", "build_head", "capture_bn_inputs", "extract_features",
    "ComputeGraph", "Tensor", "backward", "finite_difference_grad", "no_grad",
    "op_forward", "TrainConfig", "evaluate_accuracy", "pretrain_extractor",
    "transfer_finetune",
]
