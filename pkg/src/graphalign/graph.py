"""Neighbor graph over point coordinates, computed inside contiguous index chunks."""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import GraphError
from .geometry import PointSet

# query rows per distance block; bounds memory at ROW_BLOCK x M x 3 doubles
ROW_BLOCK = 256


class PadMode(str, enum.Enum):
    LITERAL_ZERO = "literal_zero"
    SELF_INDEX = "self_index"


@dataclass(frozen=True)
class GraphConfig:
    k: int = 16
    chunk_size: int = 1000
    pad_mode: PadMode = PadMode.SELF_INDEX

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise GraphError(f"k must be a positive integer, got {self.k}")
        if int(self.chunk_size) != self.chunk_size or self.chunk_size < 1:
            raise GraphError(f"chunk_size must be a positive integer, got {self.chunk_size}")
        object.__setattr__(self, "pad_mode", PadMode(self.pad_mode))


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    indices: np.ndarray  # N x K int64, global point indices
    valid: np.ndarray  # N x K bool

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def equals(self, other: NeighborGraph) -> bool:
        return np.array_equal(self.indices, other.indices) and np.array_equal(self.valid, other.valid)


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (B x 3) and b (M x 3)."""
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def partition(n_points: int, chunk_size: int) -> list[range]:
    if n_points < 1:
        raise GraphError("need at least one point to partition")
    if chunk_size < 1:
        raise GraphError("chunk_size must be positive")
    return [range(s, min(s + chunk_size, n_points)) for s in range(0, n_points, chunk_size)]


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ordered by (value, index)."""
    m = d.shape[1]
    if k >= m:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    rows = np.arange(d.shape[0])[:, None]
    kth = d[rows, part].max(axis=1)
    n_le = np.count_nonzero(d <= kth[:, None], axis=1)
    out = np.empty((d.shape[0], k), dtype=np.int64)
    clean = n_le == k
    if clean.any():
        p = part[clean]
        dv = d[clean][np.arange(p.shape[0])[:, None], p]
        order = _lexsort_rows(dv, p)
        out[clean] = np.take_along_axis(p, order, axis=1)
    tied = ~clean
    if tied.any():
        # ties straddle the k-th slot; a stable full sort picks the lower indices
        out[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return out


def _lexsort_rows(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    order = np.argsort(secondary, axis=1, kind="stable")
    p = np.take_along_axis(primary, order, axis=1)
    order2 = np.argsort(p, axis=1, kind="stable")
    return np.take_along_axis(order, order2, axis=1)


def knn_chunk(coords: np.ndarray, k: int, pad_mode=PadMode.SELF_INDEX, offset: int = 0):
    """K nearest neighbors (self included) among the rows of one chunk.

    Returns (indices, valid), both M x k, with indices shifted by ``offset``
    into global numbering. Chunks smaller than k are padded per ``pad_mode``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    m = coords.shape[0]
    if m < 1:
        raise GraphError("empty chunk")
    if k < 1:
        raise GraphError("k must be positive")
    take = min(k, m)
    local = np.empty((m, take), dtype=np.int64)
    for s in range(0, m, ROW_BLOCK):
        d = sq_dist(coords[s:s + ROW_BLOCK], coords)
        local[s:s + ROW_BLOCK] = _smallest_k(d, take)
    indices = np.empty((m, k), dtype=np.int64)
    valid = np.zeros((m, k), dtype=bool)
    indices[:, :take] = local + offset
    valid[:, :take] = True
    if take < k:
        if PadMode(pad_mode) is PadMode.LITERAL_ZERO:
            indices[:, take:] = 0
        else:
            indices[:, take:] = (np.arange(m) + offset)[:, None]
    return indices, valid


def build_graph(points: PointSet, config: GraphConfig, workers: int = 1) -> NeighborGraph:
    coords = points.coords
    chunks = partition(len(points), config.chunk_size)

    def run(r: range):
        return knn_chunk(coords[r.start:r.stop], config.k, config.pad_mode, offset=r.start)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(r) for r in chunks]
    return NeighborGraph(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
    )


def knn_bruteforce(points: PointSet, k: int) -> NeighborGraph:
    """Exact full-space KNN by sorting every distance row. Oracle only."""
    n = len(points)
    if k < 1 or k > n:
        raise GraphError(f"k must lie in [1, {n}], got {k}")
    coords = points.coords
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d = sq_dist(coords[i:i + 1], coords)[0]
        out[i] = np.argsort(d, kind="stable")[:k]
    return NeighborGraph(out, np.ones((n, k), dtype=bool))


def chunked_bruteforce(points: PointSet, config: GraphConfig) -> NeighborGraph:
    """Oracle for build_graph: full sort within each chunk, padding by hand."""
    n, k = len(points), config.k
    indices = np.empty((n, k), dtype=np.int64)
    valid = np.zeros((n, k), dtype=bool)
    for start in range(0, n, config.chunk_size):
        stop = min(start + config.chunk_size, n)
        block = points.coords[start:stop]
        for i in range(start, stop):
            d = sq_dist(points.coords[i:i + 1], block)[0]
            order = np.argsort(d, kind="stable") + start
            got = min(k, stop - start)
            indices[i, :got] = order[:got]
            valid[i, :got] = True
            pad = 0 if config.pad_mode is PadMode.LITERAL_ZERO else i
            indices[i, got:] = pad
    return NeighborGraph(indices, valid)


def neighbor_overlap(a: NeighborGraph, b: NeighborGraph) -> float:
    """Mean over rows of |A_i & B_i| / |B_i|, valid entries only."""
    total = 0.0
    for i in range(a.n):
        sa = set(a.indices[i][a.valid[i]].tolist())
        sb = set(b.indices[i][b.valid[i]].tolist())
        total += len(sa & sb) / max(len(sb), 1)
    return total / a.n
