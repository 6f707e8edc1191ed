"""Graph-based LiDAR/camera feature alignment with self-attention neighbor selection."""

from .errors import GraphAlignError
from .fusion import ImageFeatureMap, assemble_neighbor_block, fuse, gather_image_features
from .geometry import AugmentationRecord, CalibrationRig, PointSet, invert_augmentation, project
from .graph import GraphConfig, NeighborGraph, PadMode, build_graph, knn_bruteforce
from .pipeline import Method, PipelineConfig, run_pipeline
from .safa import AttentionMode, AttentionParams, init_params, max_select, self_attention

__version__ = "0.1.0"

__all__ = [
    "AttentionMode", "AttentionParams", "AugmentationRecord", "CalibrationRig", "GraphAlignError",
    "GraphConfig", "ImageFeatureMap", "Method", "NeighborGraph", "PadMode", "PipelineConfig",
    "PointSet", "assemble_neighbor_block", "build_graph", "fuse", "gather_image_features",
    "init_params", "invert_augmentation", "knn_bruteforce", "max_select", "project",
    "run_pipeline", "self_attention",
]
