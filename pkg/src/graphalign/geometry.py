"""Calibration model, LiDAR -> image projection and augmentation inversion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

ORTHO_TOL = 1e-9


def _as_matrix(value, shape, name) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CalibrationRig:
    """Pinhole camera rig.

    ``intrinsics`` are full-resolution pixels; ``scale`` is the feature-map
    down-sampling factor, so projected coordinates and ``image_width`` /
    ``image_height`` are in feature-map units.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    image_width: int
    image_height: int
    ortho_tol: float = field(default=ORTHO_TOL, repr=False)

    def __post_init__(self):
        k = _as_matrix(self.intrinsics, (3, 3), "intrinsics")
        r = _as_matrix(self.rotation, (3, 3), "rotation")
        t = _as_matrix(self.translation, (3,), "translation")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not (k[0, 0] > 0 and k[1, 1] > 0) or k[2, 2] != 1.0:
            raise GeometryError("intrinsics need positive focal lengths and K[2,2] == 1")
        if np.any(k[2, :2] != 0.0):
            raise GeometryError("intrinsics bottom row must be [0, 0, 1]")
        if np.max(np.abs(r.T @ r - np.eye(3))) > self.ortho_tol:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > self.ortho_tol:
            raise GeometryError("rotation must have determinant +1")
        scale = float(self.scale)
        if not (math.isfinite(scale) and scale > 0):
            raise GeometryError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", scale)
        for name in ("image_width", "image_height"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise GeometryError(f"{name} must be a positive integer, got {v}")
            object.__setattr__(self, name, int(v))

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix mapping homogeneous LiDAR points to scaled pixels."""
        down = np.diag([self.scale, self.scale, 1.0])
        return down @ self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def replace(self, **changes) -> CalibrationRig:
        fields = dict(
            intrinsics=self.intrinsics,
            rotation=self.rotation,
            translation=self.translation,
            scale=self.scale,
            image_width=self.image_width,
            image_height=self.image_height,
            ortho_tol=self.ortho_tol,
        )
        fields.update(changes)
        return CalibrationRig(**fields)

    def allclose(self, other: CalibrationRig, atol: float = 1e-9) -> bool:
        return (
            np.allclose(self.intrinsics, other.intrinsics, rtol=0, atol=atol)
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
            and abs(self.scale - other.scale) <= atol
            and self.image_width == other.image_width
            and self.image_height == other.image_height
        )


@dataclass(frozen=True, eq=False)
class PointSet:
    coords: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise GeometryError(f"coords must be N x 3, got {coords.shape}")
        if features.ndim != 2:
            raise GeometryError(f"features must be N x C, got {features.shape}")
        n = coords.shape[0]
        if features.shape[0] != n or labels.shape != (n,):
            raise GeometryError("coords, features and labels disagree on N")
        if not np.all(np.isfinite(coords)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> PointSet:
        return PointSet(self.coords[index], self.features[index], self.labels[index])

    def with_coords(self, coords) -> PointSet:
        return PointSet(coords, self.features, self.labels)


@dataclass(frozen=True)
class AugmentationRecord:
    """Forward augmentation applied as scale -> yaw rotation -> y flip."""

    flipped_y: bool = False
    yaw: float = 0.0
    scale_factor: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.scale_factor) and self.scale_factor > 0):
            raise GeometryError(f"scale_factor must be positive, got {self.scale_factor}")
        if not (-math.pi < self.yaw <= math.pi):
            raise GeometryError(f"yaw must lie in (-pi, pi], got {self.yaw}")


@dataclass(frozen=True, eq=False)
class ProjectedCoords:
    pixel: np.ndarray  # M x 2, (x, y)
    depth: np.ndarray  # M
    source_index: np.ndarray  # M, row into the source PointSet
    n_source: int = 0

    def __len__(self) -> int:
        return self.depth.shape[0]


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def invert_augmentation(points: PointSet, record: AugmentationRecord) -> PointSet:
    coords = points.coords.copy()
    if record.flipped_y:
        coords[:, 1] = -coords[:, 1]
    if record.yaw != 0.0:
        # row vectors: p @ R.T rotates, p @ R un-rotates
        coords = coords @ yaw_matrix(record.yaw)
    if record.scale_factor != 1.0:
        with np.errstate(over="ignore"):
            coords = coords / record.scale_factor
    if not np.all(np.isfinite(coords)):
        raise GeometryError("inverse augmentation produced non-finite coordinates")
    return points.with_coords(coords)


def project(points: PointSet, rig: CalibrationRig) -> ProjectedCoords:
    """Project points into the feature map and apply the bounds correction rule.

    Points at or behind the image plane (depth <= 0) are dropped first, then
    anything outside the closed box [0, width] x [0, height].
    """
    cam = points.coords @ rig.rotation.T + rig.translation
    depth = cam[:, 2]
    front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = cam[:, :2] @ rig.intrinsics[:2, :2].T
        uv = uv / depth[:, None] + rig.intrinsics[:2, 2]
    uv = uv * rig.scale
    keep = (
        front
        & (uv[:, 0] >= 0) & (uv[:, 0] <= rig.image_width)
        & (uv[:, 1] >= 0) & (uv[:, 1] <= rig.image_height)
    )
    idx = np.flatnonzero(keep)
    return ProjectedCoords(uv[idx], depth[idx], idx, n_source=len(points))


def pixel_index(pixel: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Floor continuous (x, y) to (row, col), clamping the closed upper edge."""
    col = np.minimum(np.floor(pixel[:, 0]).astype(np.int64), width - 1)
    row = np.minimum(np.floor(pixel[:, 1]).astype(np.int64), height - 1)
    return row, col


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest orthonormal matrix with det +1 (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * x + (1 - math.cos(angle)) * (x @ x)


def rotation_angle(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))
