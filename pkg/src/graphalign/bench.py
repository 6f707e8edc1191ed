"""Alignment metrics by distance bucket, complexity estimates, timing and sweeps."""

from __future__ import annotations

import itertools
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BenchError
from .geometry import CalibrationRig
from .graph import GraphConfig
from .pipeline import STAGES, Method, PipelineConfig, run_pipeline
from .safa import AttentionMode, TrainingExample, attention_mac_count, init_params
from .scene import Scene

BUCKETS = (("0-20m", 0.0, 20.0), ("20-40m", 20.0, 40.0), ("40m-inf", 40.0, float("inf")))
FAR = "40m-inf"
CLASS_THRESHOLD = 0.5  # half a unit class embedding

REFERENCE_K = (9, 16, 25, 36, 48)
REFERENCE_CHUNKS = (500, 1000, 3000, 5000, 8000, 10000)
REFERENCE_HEADS = (1, 2, 3, 4)


@dataclass(frozen=True)
class BucketMetrics:
    """Accuracy and cosine cover object points (the ones with a class embedding);
    ``n`` counts every surviving point in the bucket."""

    method: str
    bucket: str
    accuracy: float
    cosine: float
    n: int
    n_labeled: int = 0
    background_accuracy: float = 0.0


@dataclass
class AlignmentReport:
    buckets: list[BucketMetrics] = field(default_factory=list)
    surviving: dict[str, int] = field(default_factory=dict)
    timing_ms: dict[str, dict[str, float]] = field(default_factory=dict)
    complexity: dict[str, float] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)

    def get(self, method, bucket: str) -> BucketMetrics:
        method = Method(method).value
        for b in self.buckets:
            if b.method == method and b.bucket == bucket:
                return b
        raise KeyError((method, bucket))

    def merge(self, other: AlignmentReport) -> AlignmentReport:
        self.buckets.extend(other.buckets)
        self.surviving.update(other.surviving)
        self.timing_ms.update(other.timing_ms)
        self.complexity.update(other.complexity)
        self.config.update(other.config)
        return self

    def check_invariants(self) -> list[str]:
        problems = []
        for b in self.buckets:
            if not 0.0 <= b.accuracy <= 1.0:
                problems.append(f"{b.method}/{b.bucket}: accuracy {b.accuracy} outside [0, 1]")
            if not 0.0 <= b.background_accuracy <= 1.0:
                problems.append(f"{b.method}/{b.bucket}: background accuracy outside [0, 1]")
            if not 0 <= b.n_labeled <= b.n:
                problems.append(f"{b.method}/{b.bucket}: labeled count outside [0, n]")
        for method, n in self.surviving.items():
            total = sum(b.n for b in self.buckets if b.method == method)
            if total != n:
                problems.append(f"{method}: bucket counts {total} != surviving {n}")
        ratio = self.complexity.get("ratio")
        if ratio is not None and not ratio > 0:
            problems.append(f"complexity ratio {ratio} is not positive")
        return problems


def complexity_ratio(image_w: float, image_h: float, k: float) -> float:
    """Per-point, per-channel cost of cross-attention over the whole image vs K^2 self-attention."""
    if image_w <= 0 or image_h <= 0 or k <= 0:
        raise BenchError("complexity_ratio needs positive inputs")
    return (image_w * image_h) / (k * k)


def complexity_estimate(n: int, k: int, c: int, image_w: int, image_h: int) -> dict[str, float]:
    safa = attention_mac_count(n, k, c)
    # cross-attention: every point scores and weights all W*H pixels
    cross = 2 * n * image_w * image_h * c
    return {"safa_macs": safa, "cross_attention_macs": cross,
            "ratio": complexity_ratio(image_w, image_h, k)}


def predicted_class(contribution: np.ndarray, n_classes: int) -> np.ndarray:
    cls = contribution[:, :n_classes]
    if cls.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    best = cls.argmax(axis=1)
    return np.where(cls[np.arange(len(cls)), best] >= CLASS_THRESHOLD, best + 1, 0)


def cosine_to_target(contribution: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row cosine similarity against non-zero targets; a zero contribution scores 0."""
    na = np.linalg.norm(contribution, axis=1)
    nb = np.linalg.norm(target, axis=1)
    dot = np.sum(contribution * target, axis=1)
    return np.divide(dot, na * nb, out=np.zeros_like(dot), where=na * nb > 0)


def bucket_of(ranges: np.ndarray) -> np.ndarray:
    edges = np.array([b[2] for b in BUCKETS[:-1]])
    return np.searchsorted(edges, ranges, side="right")


def _check_method_config(method: Method, config: PipelineConfig):
    if method is Method.GRAPH_SAFA_MAX and config.params is None:
        raise BenchError("graph_safa_max needs attention parameters")


def evaluate(scene: Scene, rig: CalibrationRig, method, config: PipelineConfig) -> AlignmentReport:
    method = Method(method)
    _check_method_config(method, config)
    result = run_pipeline(scene.points, scene.fmap, rig, method, config)
    keep = result.source_index
    n_classes = scene.spec.n_classes
    labels = scene.truth.labels[keep]
    pred = predicted_class(result.contribution, n_classes)
    target = scene.truth.target(keep)[:, :n_classes]
    cos = cosine_to_target(result.contribution[:, :n_classes], target)
    ranges = np.linalg.norm(scene.points.coords[keep], axis=1)
    which = bucket_of(ranges)
    obj = labels > 0
    hit = pred == labels
    report = AlignmentReport()
    for b, (name, _lo, _hi) in enumerate(BUCKETS):
        sel = which == b
        so, sb = sel & obj, sel & ~obj
        n_obj, n_bg = int(so.sum()), int(sb.sum())
        report.buckets.append(BucketMetrics(
            method.value, name,
            accuracy=float(hit[so].mean()) if n_obj else 0.0,
            cosine=float(cos[so].mean()) if n_obj else 0.0,
            n=int(sel.sum()),
            n_labeled=n_obj,
            background_accuracy=float(hit[sb].mean()) if n_bg else 0.0,
        ))
    report.surviving[method.value] = len(keep)
    k = config.graph.k if method is not Method.PROJECTION_ONLY else 1
    report.complexity = complexity_estimate(len(keep), k, scene.points.channels,
                                            scene.fmap.width, scene.fmap.height)
    if method is Method.GRAPH_SAFA_MAX:
        report.complexity["instrumented_safa_macs"] = result.attention_macs
    return report


def time_pipeline(scene: Scene, rig: CalibrationRig, method, config: PipelineConfig,
                  repetitions: int = 5) -> dict[str, dict[str, float]]:
    """Median / min / max milliseconds per stage after one discarded warm-up run."""
    if repetitions < 3:
        raise BenchError(f"need at least 3 repetitions, got {repetitions}")
    method = Method(method)
    _check_method_config(method, config)
    run_pipeline(scene.points, scene.fmap, rig, method, config)
    samples = {s: [] for s in (*STAGES, "total")}
    for _ in range(repetitions):
        t0 = time.perf_counter()
        res = run_pipeline(scene.points, scene.fmap, rig, method, config)
        samples["total"].append(time.perf_counter() - t0)
        for s in STAGES:
            samples[s].append(res.timings[s])
    return {s: {"median_ms": 1e3 * statistics.median(v), "min_ms": 1e3 * min(v),
                "max_ms": 1e3 * max(v)} for s, v in samples.items()}


def training_examples(scenes, rigs, graph: GraphConfig, max_points: int | None = None,
                      seed: int = 0) -> list[TrainingExample]:
    """Fused blocks and error-free targets for the trainer, one example per scene.

    ``max_points`` subsamples each scene's surviving points to keep
    finite-difference training affordable.
    """
    rng = np.random.default_rng(seed)
    out = []
    for scene, rig in zip(scenes, rigs):
        res = run_pipeline(scene.points, scene.fmap, rig, Method.GRAPH_MAX,
                           PipelineConfig(graph=graph))
        keep = res.source_index
        rows = np.arange(len(keep))
        if max_points is not None and len(rows) > max_points:
            rows = np.sort(rng.choice(rows, size=max_points, replace=False))
        out.append(TrainingExample(res.fused.take(rows), scene.points.features[keep[rows]],
                                   scene.truth.target(keep[rows])))
    return out


@dataclass(frozen=True)
class SweepGrid:
    k: tuple[int, ...] = (16,)
    chunk: tuple[int, ...] = (1000,)
    heads: tuple[int, ...] = (1,)
    methods: tuple[str, ...] = tuple(m.value for m in Method)

    def __post_init__(self):
        if not (self.k and self.chunk and self.heads and self.methods):
            raise BenchError("sweep grid axes must be non-empty")

    def cells(self):
        return list(itertools.product(self.methods, self.k, self.chunk, self.heads))


SWEEP_COLUMNS = ("seed", "method", "K", "chunk", "H", "bucket", "accuracy", "cosine", "n",
                 "n_labeled", "background_accuracy", *(f"{s}_ms" for s in STAGES), "total_ms")


def sweep(scenes, rigs, grid: SweepGrid, mode=AttentionMode.LITERAL, params_for=None,
          repetitions: int | None = 3, workers: int = 1) -> list[dict]:
    """Evaluate (and optionally time) every grid cell on every scene.

    ``params_for(channels, heads)`` supplies attention parameters; defaults to
    a seeded init. Timing is skipped when ``repetitions`` is None.
    """
    if params_for is None:
        def params_for(channels, heads):
            return init_params(channels, heads, seed=0)

    memo = {}

    def effective(si, cell):
        # axes a method ignores do not change its result
        method, k, chunk, h = cell
        if method == Method.PROJECTION_ONLY:
            return si, method
        if method == Method.GRAPH_MAX:
            return si, method, k, chunk
        return si, method, k, chunk, h

    def run_cell(si, scene, rig, cell):
        method, k, chunk, h = cell
        params = params_for(scene.points.channels, h) if method == Method.GRAPH_SAFA_MAX else None
        cfg = PipelineConfig(GraphConfig(k=k, chunk_size=chunk), params, AttentionMode(mode))
        key = effective(si, cell)
        if key not in memo:
            memo[key] = evaluate(scene, rig, method, cfg)
        report = memo[key]
        timing = None
        if repetitions is not None:
            timing = time_pipeline(scene, rig, method, cfg, repetitions)
        rows = []
        for b in report.buckets:
            row = {"seed": scene.spec.seed, "method": b.method, "K": k, "chunk": chunk, "H": h,
                   "bucket": b.bucket, "accuracy": b.accuracy, "cosine": b.cosine, "n": b.n,
                   "n_labeled": b.n_labeled, "background_accuracy": b.background_accuracy}
            for s in (*STAGES, "total"):
                row[f"{s}_ms"] = timing[s]["median_ms"] if timing else None
            rows.append(row)
        return rows

    jobs = [(si, scene, rig, cell) for si, (scene, rig) in enumerate(zip(scenes, rigs))
            for cell in grid.cells()]
    if workers > 1 and repetitions is None:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: run_cell(*j), jobs))
    else:
        # timed cells run one at a time to keep measurements quiet
        parts = [run_cell(*j) for j in jobs]
    return [row for part in parts for row in part]
