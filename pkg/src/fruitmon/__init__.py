"""Fruit monitoring on colored orchard point clouds.

Panoptic fruit segmentation (sparse conv U-net + offset clustering),
per-fruit descriptors (sparse residual encoder), attention-based temporal
re-identification with an explicit new-fruit class, a nearest-center
baseline, synthetic orchard data, and the evaluation protocol.
"""
from .cloud import (
    AugmentConfig,
    ColoredCloud,
    FruitInstance,
    SceneAnnotation,
    TemporalAssociation,
    augment,
    crop_box,
    load_ply,
    save_ply,
)
from .encoder import DescriptorSet, EncoderConfig, build_encoder, encode, encode_all
from .matcher import (
    MatchConfig,
    batch_match,
    build_matcher,
    greedy_assign,
    loss_match,
    match_query,
    positional_encoding,
    train_matcher,
)
from .metrics import (
    f1_scores,
    match_instances,
    matching_confusion,
    panoptic_quality,
    transfer_ids,
)
from .baseline import nn_match, sweep_epsilon
from .persistence import load_reid_models, load_seg_model, save_reid_models, save_seg_model
from .segmentation import (
    SegNetConfig,
    build_segnet,
    loss_ins,
    mean_shift,
    seg_forward,
    segment_cloud,
    shift_points,
    train_segmentation,
    tune_bandwidth,
)
from .sparsegrid import kernel_neighbors, support, voxelize
from .synth import OrchardConfig, corrupt_instances, generate_pair, generate_scene

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ColoredCloud", "FruitInstance", "SceneAnnotation",
    "TemporalAssociation", "augment", "crop_box", "load_ply", "save_ply",
    "DescriptorSet", "EncoderConfig", "build_encoder", "encode", "encode_all",
    "MatchConfig", "batch_match", "build_matcher", "greedy_assign", "loss_match",
    "match_query", "positional_encoding", "train_matcher",
    "f1_scores", "match_instances", "matching_confusion", "panoptic_quality",
    "transfer_ids",
    "nn_match", "sweep_epsilon",
    "load_reid_models", "load_seg_model", "save_reid_models", "save_seg_model",
    "SegNetConfig", "build_segnet", "loss_ins", "mean_shift", "seg_forward",
    "segment_cloud", "shift_points", "train_segmentation", "tune_bandwidth",
    "kernel_neighbors", "support", "voxelize",
    "OrchardConfig", "corrupt_instances", "generate_pair", "generate_scene",
    "__version__",
]
