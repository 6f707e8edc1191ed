"""End-to-end alignment: project, build the neighbor graph, fuse, attend, max."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BenchError
from .fusion import ChannelAdapter, FusedBlock, ImageFeatureMap, assemble_neighbor_block, fuse, \
    gather_image_features
from .geometry import AugmentationRecord, CalibrationRig, PointSet, invert_augmentation, project
from .graph import GraphConfig, build_graph
from .safa import AttentionMode, AttentionParams, Diagnostics, max_select, self_attention

STAGES = ("project", "build_graph", "fuse", "attention", "max")


class Method(str, enum.Enum):
    PROJECTION_ONLY = "projection_only"
    GRAPH_MAX = "graph_max"
    GRAPH_SAFA_MAX = "graph_safa_max"


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    params: AttentionParams | None = None
    mode: AttentionMode = AttentionMode.LITERAL
    adapter: ChannelAdapter | None = None
    workers: int = 1


@dataclass(eq=False)
class PipelineResult:
    method: Method
    source_index: np.ndarray  # surviving point rows
    contribution: np.ndarray  # surviving M x C image contribution after alignment
    output: np.ndarray  # N x C fused features; dropped points keep their LiDAR feature
    fused: FusedBlock | None = None
    attention_macs: int = 0
    timings: dict[str, float] = field(default_factory=dict)  # seconds
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


def run_pipeline(points: PointSet, fmap: ImageFeatureMap, rig: CalibrationRig, method,
                 config: PipelineConfig, augmentation: AugmentationRecord | None = None
                 ) -> PipelineResult:
    method = Method(method)
    if method is Method.GRAPH_SAFA_MAX and config.params is None:
        raise BenchError("graph_safa_max needs attention parameters")
    if config.params is not None and method is Method.GRAPH_SAFA_MAX \
            and config.params.channels != points.channels:
        raise BenchError(
            f"attention params have {config.params.channels} channels, points have "
            f"{points.channels}")
    timings = dict.fromkeys(STAGES, 0.0)
    diag = Diagnostics()

    t0 = time.perf_counter()
    if augmentation is not None:
        points = invert_augmentation(points, augmentation)
    proj = project(points, rig)
    timings["project"] = time.perf_counter() - t0
    keep = proj.source_index
    fp = points.features

    if method is Method.PROJECTION_ONLY:
        t0 = time.perf_counter()
        gathered = gather_image_features(fmap, proj, config.adapter)
        fused_rows = fp[keep] + gathered
        timings["fuse"] = time.perf_counter() - t0
        output = fp.copy()
        output[keep] = fused_rows
        return PipelineResult(method, keep, fused_rows - fp[keep], output,
                              timings=timings, diagnostics=diag)

    t0 = time.perf_counter()
    graph = build_graph(points, config.graph, workers=config.workers)
    timings["build_graph"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gathered = gather_image_features(fmap, proj, config.adapter)
    block, mask = assemble_neighbor_block(gathered, graph, proj)
    fused = fuse(fp, block, mask).take(keep)
    timings["fuse"] = time.perf_counter() - t0

    macs = 0
    features = fused.data
    if method is Method.GRAPH_SAFA_MAX:
        t0 = time.perf_counter()
        att = self_attention(fused, config.params, config.mode, workers=config.workers,
                             keep_weights=False, diag=diag)
        timings["attention"] = time.perf_counter() - t0
        features = att.features
        macs = att.attention_macs

    t0 = time.perf_counter()
    selected = max_select(features, fused.valid, diag=diag)
    timings["max"] = time.perf_counter() - t0
    output = fp.copy()
    output[keep] = selected
    return PipelineResult(method, keep, selected - fp[keep], output, fused=fused,
                          attention_macs=macs, timings=timings, diagnostics=diag)
