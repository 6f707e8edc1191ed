"""Image feature gather, neighbor block assembly and additive point/pixel fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FusionError
from .geometry import ProjectedCoords, pixel_index
from .graph import NeighborGraph


@dataclass(frozen=True, eq=False)
class ImageFeatureMap:
    data: np.ndarray  # height x width x channels

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise FusionError(f"feature map must be H x W x C, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FusionError("feature map has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ChannelAdapter:
    """Affine map from image channels C' to point channels C: ``x @ weight + bias``."""

    weight: np.ndarray  # C' x C
    bias: np.ndarray  # C
    is_identity: bool = False

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise FusionError(f"adapter shapes disagree: weight {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise FusionError("adapter has non-finite entries")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def identity(cls, channels: int) -> ChannelAdapter:
        return cls(np.eye(channels), np.zeros(channels), is_identity=True)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class FusedBlock:
    data: np.ndarray  # N x K x C
    valid: np.ndarray  # N x K

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def take(self, rows) -> FusedBlock:
        return FusedBlock(self.data[rows], self.valid[rows])


def gather_image_features(fmap: ImageFeatureMap, proj: ProjectedCoords,
                          adapter: ChannelAdapter | None = None) -> np.ndarray:
    """Read the feature map at each projected pixel (floor, clamped) -> M x C."""
    if adapter is None:
        adapter = ChannelAdapter.identity(fmap.channels)
    if adapter.in_channels != fmap.channels:
        raise FusionError(
            f"adapter expects {adapter.in_channels} channels, feature map has {fmap.channels}")
    row, col = pixel_index(proj.pixel, fmap.width, fmap.height)
    if len(row) and (row.min() < 0 or col.min() < 0):
        raise FusionError("projected pixel lies outside the feature map")
    feats = fmap.data[row, col]
    if adapter.is_identity:
        return feats.copy()
    return feats @ adapter.weight + adapter.bias


def assemble_neighbor_block(gathered: np.ndarray, graph: NeighborGraph,
                            proj: ProjectedCoords) -> tuple[np.ndarray, np.ndarray]:
    """Index gathered image features by the neighbor table.

    Returns an N x K x C block and N x K mask. Slots whose neighbor was dropped
    by projection are zero and invalid; rows whose own point was dropped are
    fully masked.
    """
    n, k = graph.indices.shape
    c = gathered.shape[1]
    if gathered.shape[0] != len(proj):
        raise FusionError("gathered features and projection disagree on M")
    # point index -> row in gathered, -1 when dropped by projection
    lookup = np.full(n, -1, dtype=np.int64)
    lookup[proj.source_index] = np.arange(len(proj))
    rows = lookup[graph.indices]
    valid = graph.valid & (rows >= 0)
    own = np.zeros(n, dtype=bool)
    own[proj.source_index] = True
    valid &= own[:, None]
    block = np.zeros((n, k, c), dtype=np.float64)
    block[valid] = gathered[rows[valid]]
    return block, valid


def fuse(point_features: np.ndarray, neighbor_block: np.ndarray, mask: np.ndarray) -> FusedBlock:
    """Replicate each point feature K times and add its image neighbors on valid slots."""
    n, k, c = neighbor_block.shape
    if point_features.shape != (n, c) or mask.shape != (n, k):
        raise FusionError(
            f"shape mismatch: points {point_features.shape}, block {neighbor_block.shape}, "
            f"mask {mask.shape}")
    data = np.broadcast_to(point_features[:, None, :], (n, k, c)).copy()
    data[mask] += neighbor_block[mask]
    return FusedBlock(data, mask.copy())
