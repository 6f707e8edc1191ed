"""Seeded synthetic driving scenes: labeled boxes on a ground plane, a LiDAR-like
point cloud, a rendered class-embedding feature map and calibration error injection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SceneError
from .fusion import ImageFeatureMap
from .geometry import (CalibrationRig, PointSet, axis_angle_matrix, nearest_rotation,
                       pixel_index)

BACKGROUND = 0
GROUND_Z = -1.73  # LiDAR mounting height above the road, meters
REFERENCE_RANGE = 10.0  # range at which an object receives points_per_object points
MIN_OBJECT_POINTS = 3

# LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd)
LIDAR_TO_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
CAMERA_OFFSET = np.array([0.0, -0.08, -0.27])

# length, width, height per object class; cycled when n_classes exceeds the table
BOX_SIZES = [(3.9, 1.6, 1.56), (0.8, 0.6, 1.73), (1.76, 0.6, 1.73)]


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_objects: int = 12
    n_classes: int = 3
    range_min: float = 5.0
    range_max: float = 70.0
    points_per_object: int = 2000
    ground_points: int = 12000
    image_width: int = 320  # feature-map units
    image_height: int = 96
    channels: int = 12
    scale: float = 0.25
    focal: float = 720.0  # full-resolution pixels
    scan_order: bool = True
    n_beams: int = 64
    elevation_min: float = -24.8  # degrees, lowest beam
    elevation_max: float = 2.0  # degrees, highest beam
    azimuth_span: float = 100.0  # degrees, frontal sector kept from the sweep
    point_feature_strength: float = 1.0
    point_feature_noise: float = 0.1

    def __post_init__(self):
        if not self.range_max > 0 or not 0 < self.range_min < self.range_max:
            raise SceneError("need 0 < range_min < range_max")
        for name in ("n_objects", "points_per_object", "ground_points"):
            if getattr(self, name) < 0:
                raise SceneError(f"{name} must be non-negative")
        if self.n_classes < 1 or self.channels < self.n_classes:
            raise SceneError("channels must be at least n_classes (>= 1)")
        if self.image_width < 1 or self.image_height < 1 or self.scale <= 0 or self.focal <= 0:
            raise SceneError("image dimensions, scale and focal must be positive")
        if self.n_beams < 1 or not self.elevation_min < min(self.elevation_max, 0.0):
            raise SceneError("need at least one beam and a beam pointing below the horizon")
        if not 0 < self.azimuth_span <= 360:
            raise SceneError("azimuth_span must lie in (0, 360]")
        if self.point_feature_noise < 0:
            raise SceneError("point_feature_noise must be non-negative")


@dataclass(frozen=True)
class PerturbationSpec:
    translation_sigma: float = 0.0  # meters, per axis
    rotation_sigma: float = 0.0  # radians
    timing_skew: float = 0.0  # meters, lateral (camera x)
    seed: int = 0

    def __post_init__(self):
        if min(self.translation_sigma, self.rotation_sigma, self.timing_skew) < 0:
            raise SceneError("perturbation magnitudes must be non-negative")


@dataclass(frozen=True, eq=False)
class Box:
    label: int
    center: np.ndarray
    size: tuple[float, float, float]
    yaw: float

    def corners(self) -> np.ndarray:
        l, w, h = self.size
        sx, sy, sz = np.meshgrid([-0.5, 0.5], [-0.5, 0.5], [-0.5, 0.5], indexing="ij")
        local = np.stack([sx.ravel() * l, sy.ravel() * w, sz.ravel() * h], axis=1)
        return local @ _yaw(self.yaw).T + self.center


@dataclass(frozen=True, eq=False)
class GroundTruth:
    labels: np.ndarray  # N, class per point (0 = background)
    pixel: np.ndarray  # N x 2 error-free pixel, NaN where the clean rig does not see it
    embeddings: np.ndarray  # (n_classes + 1) x C, row 0 is the zero background

    def target(self, index=slice(None)) -> np.ndarray:
        return self.embeddings[self.labels[index]]


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    points: PointSet
    fmap: ImageFeatureMap
    rig: CalibrationRig
    truth: GroundTruth
    boxes: tuple[Box, ...] = ()


def _yaw(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def class_embeddings(n_classes: int, channels: int) -> np.ndarray:
    """Row c is the one-hot embedding of class c in channel c-1; row 0 is zero."""
    emb = np.zeros((n_classes + 1, channels))
    emb[np.arange(1, n_classes + 1), np.arange(n_classes)] = 1.0
    return emb


def default_rig(spec: SceneSpec) -> CalibrationRig:
    cx = spec.image_width / spec.scale / 2.0
    cy = spec.image_height / spec.scale / 2.0
    k = np.array([[spec.focal, 0.0, cx], [0.0, spec.focal, cy], [0.0, 0.0, 1.0]])
    return CalibrationRig(k, LIDAR_TO_CAMERA, CAMERA_OFFSET, spec.scale,
                          spec.image_width, spec.image_height)


def _raw_projection(coords: np.ndarray, rig: CalibrationRig):
    cam = coords @ rig.rotation.T + rig.translation
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (cam[:, :2] @ rig.intrinsics[:2, :2].T) / depth[:, None] + rig.intrinsics[:2, 2]
    uv = uv * rig.scale
    inside = ((depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= rig.image_width)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= rig.image_height))
    return uv, inside


def _place_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box]:
    half_fov = math.atan(spec.image_width / spec.scale / 2.0 / spec.focal)
    boxes: list[Box] = []
    for _ in range(spec.n_objects):
        label = int(rng.integers(1, spec.n_classes + 1))
        size = BOX_SIZES[(label - 1) % len(BOX_SIZES)]
        radius = math.hypot(size[0], size[1]) / 2.0
        for _attempt in range(50):
            r = rng.uniform(spec.range_min, spec.range_max)
            az = rng.uniform(-0.9 * half_fov, 0.9 * half_fov)
            yaw = rng.uniform(-math.pi, math.pi)
            center = np.array([r * math.cos(az), r * math.sin(az), GROUND_Z + size[2] / 2.0])
            clear = all(
                np.hypot(*(center[:2] - b.center[:2])) > radius + math.hypot(*b.size[:2]) / 2.0
                for b in boxes)
            if clear:
                boxes.append(Box(label, center, size, yaw))
                break
    return boxes


def _sample_box_surface(box: Box, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the faces of the box that face the sensor (top included)."""
    l, w, h = box.size
    rot = _yaw(box.yaw)
    # (normal axis, sign, in-face axes, area)
    faces = [(0, 1, (1, 2), w * h), (0, -1, (1, 2), w * h),
             (1, 1, (0, 2), l * h), (1, -1, (0, 2), l * h),
             (2, 1, (0, 1), l * w)]
    half = np.array([l, w, h]) / 2.0
    visible = []
    for axis, sign, span, area in faces:
        normal = np.zeros(3)
        normal[axis] = sign
        centre = box.center + rot @ (normal * half)
        if (rot @ normal) @ (-centre) > 0 or axis == 2:
            visible.append((axis, sign, span, area))
    areas = np.array([f[3] for f in visible])
    which = rng.choice(len(visible), size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    local = np.empty((n, 3))
    for i, (axis, sign, span, _area) in enumerate(visible):
        sel = which == i
        local[sel, axis] = sign * half[axis]
        local[sel, span[0]] = uv[sel, 0] * half[span[0]]
        local[sel, span[1]] = uv[sel, 1] * half[span[1]]
    return local @ rot.T + box.center


def ground_ring_ranges(spec: SceneSpec) -> np.ndarray:
    """Ranges at which the downward beams meet the road, nearest first, within range_max."""
    elev = np.linspace(spec.elevation_min, spec.elevation_max, spec.n_beams)
    elev = elev[elev < 0]
    r = -GROUND_Z / np.tan(np.radians(-elev))
    return np.sort(r[r <= spec.range_max])


def _sample_ground_rings(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Ground returns on beam rings, split evenly across rings, random azimuth in the sector."""
    rings = ground_ring_ranges(spec)
    if len(rings) == 0:
        raise SceneError("no beam reaches the ground within range_max")
    per_ring = np.full(len(rings), spec.ground_points // len(rings))
    per_ring[: spec.ground_points % len(rings)] += 1
    r = np.repeat(rings, per_ring)
    half = math.radians(spec.azimuth_span) / 2.0
    az = rng.uniform(-half, half, spec.ground_points)
    return np.stack([r * np.cos(az), r * np.sin(az), np.full(len(r), GROUND_Z)], axis=1)


def _render(boxes, rig: CalibrationRig) -> np.ndarray:
    """Painter's-order class map: far boxes first, each filling its projected bounding rectangle."""
    class_map = np.zeros((rig.image_height, rig.image_width), dtype=np.int64)
    for box in sorted(boxes, key=lambda b: -float(np.linalg.norm(b.center))):
        corners = box.corners()
        cam = corners @ rig.rotation.T + rig.translation
        if np.any(cam[:, 2] <= 0):
            continue
        uv = ((cam[:, :2] @ rig.intrinsics[:2, :2].T) / cam[:, 2:3] + rig.intrinsics[:2, 2])
        uv = uv * rig.scale
        x0, y0 = np.floor(uv.min(axis=0)).astype(int)
        x1, y1 = np.floor(uv.max(axis=0)).astype(int)
        if x1 < 0 or y1 < 0 or x0 > rig.image_width - 1 or y0 > rig.image_height - 1:
            continue
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, rig.image_width - 1), min(y1, rig.image_height - 1)
        class_map[y0:y1 + 1, x0:x1 + 1] = box.label
    return class_map


def scan_permutation(coords: np.ndarray) -> np.ndarray:
    """Order points by azimuth, then elevation, like a rotating scanner."""
    az = np.arctan2(coords[:, 1], coords[:, 0])
    el = np.arctan2(coords[:, 2], np.hypot(coords[:, 0], coords[:, 1]))
    return np.lexsort((el, az))


def generate(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    rig = default_rig(spec)
    boxes = _place_boxes(spec, rng)

    coords, labels = [], []
    for box in boxes:
        r = float(np.linalg.norm(box.center[:2]))
        n = max(MIN_OBJECT_POINTS, round(spec.points_per_object * (REFERENCE_RANGE / r) ** 2))
        coords.append(_sample_box_surface(box, n, rng))
        labels.append(np.full(n, box.label, dtype=np.int64))
    if spec.ground_points:
        ground = _sample_ground_rings(spec, rng)
        coords.append(ground)
        labels.append(np.full(len(ground), BACKGROUND, dtype=np.int64))
    coords = np.concatenate(coords) if coords else np.zeros((0, 3))
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)

    class_map = _render(boxes, rig)
    uv, inside = _raw_projection(coords, rig)
    row, col = pixel_index(uv[inside], rig.image_width, rig.image_height)
    # the sensor cannot see surfaces hidden behind a nearer box
    occluded = np.zeros(len(coords), dtype=bool)
    occluded[np.flatnonzero(inside)] = class_map[row, col] != labels[inside]
    keep = ~occluded
    coords, labels, uv, inside = coords[keep], labels[keep], uv[keep], inside[keep]

    if spec.scan_order:
        order = scan_permutation(coords)
    else:
        order = rng.permutation(len(coords))
    coords, labels, uv, inside = coords[order], labels[order], uv[order], inside[order]

    emb = class_embeddings(spec.n_classes, spec.channels)
    offset = spec.n_classes if spec.channels >= 2 * spec.n_classes else 0
    features = rng.normal(0.0, spec.point_feature_noise, size=(len(coords), spec.channels))
    obj = labels > 0
    features[np.flatnonzero(obj), offset + labels[obj] - 1] += spec.point_feature_strength

    pixel = np.where(inside[:, None], uv, np.nan)
    fmap = ImageFeatureMap(emb[class_map])
    return Scene(spec, PointSet(coords, features, labels), fmap, rig,
                 GroundTruth(labels.copy(), pixel, emb), tuple(boxes))


def perturb(rig: CalibrationRig, spec: PerturbationSpec) -> CalibrationRig:
    rng = np.random.default_rng(spec.seed)
    t = rig.translation.copy()
    r = rig.rotation
    if spec.translation_sigma > 0:
        t = t + rng.normal(0.0, spec.translation_sigma, 3)
    if spec.rotation_sigma > 0:
        axis = rng.normal(size=3)
        angle = abs(rng.normal(0.0, spec.rotation_sigma))
        r = nearest_rotation(axis_angle_matrix(axis, angle) @ r)
    t[0] += spec.timing_skew
    if spec.translation_sigma == 0 and spec.rotation_sigma == 0 and spec.timing_skew == 0:
        return rig
    return rig.replace(rotation=r, translation=t)


def chunk_diameter(coords: np.ndarray, chunk_size: int) -> float:
    """Mean over chunks of the bounding-box diagonal of each index-contiguous chunk."""
    diam = []
    for s in range(0, len(coords), chunk_size):
        c = coords[s:s + chunk_size]
        diam.append(float(np.linalg.norm(c.max(axis=0) - c.min(axis=0))))
    return float(np.mean(diam))
