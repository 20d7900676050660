"""Scene pairs from posed scans, and a synthetic scene generator for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EmptyInputError,
    GeometryError,
    RigidPose,
    as_cloud,
    crop_range,
    fps,
    range_mask,
    sample_without_replacement,
    transform,
    voxel_keys,
)

SEMANTIC_KITTI_MOVING = frozenset(range(252, 260))


class PipelineError(ValueError):
    pass


class RegionTooSparseError(PipelineError):
    pass


@dataclass
class PipelineConfig:
    range_m: float = 50.0
    n_input: int = 18000
    n_gt: int = 180000
    moving_label_ids: frozenset[int] = SEMANTIC_KITTI_MOVING
    dedup_resolution: float | None = None

    def validate(self) -> None:
        if self.range_m <= 0:
            raise PipelineError("range_m must be positive")
        if not 1 <= self.n_input <= self.n_gt:
            raise PipelineError("need 1 <= n_input <= n_gt")
        if self.dedup_resolution is not None and self.dedup_resolution <= 0:
            raise PipelineError("dedup resolution must be positive or None")


@dataclass
class ScenePair:
    input: np.ndarray
    gt: np.ndarray
    center_pose: RigidPose = field(default_factory=RigidPose.identity)


def dedup_voxels(points, resolution: float) -> np.ndarray:
    """Keep the first point that falls in each voxel, preserving order."""
    pts = as_cloud(points)
    if len(pts) == 0:
        return pts
    _, first = np.unique(voxel_keys(pts, resolution), axis=0, return_index=True)
    return pts[np.sort(first)]


def build_map(scans, labels=None, config: PipelineConfig | None = None) -> np.ndarray:
    """Aggregate posed scans into one world-frame cloud without moving objects.

    ``scans`` is a sequence of ``(cloud, pose)``; ``labels`` an optional
    sequence of per-point semantic class arrays aligned with it.
    """
    config = config or PipelineConfig()
    scans = list(scans)
    if not scans:
        raise PipelineError("build_map needs at least one scan")
    if labels is not None:
        labels = list(labels)
        if len(labels) != len(scans):
            raise PipelineError(f"{len(labels)} label arrays for {len(scans)} scans")
    moving = np.array(sorted(config.moving_label_ids), dtype=np.int64)
    parts = []
    for i, (cloud, pose) in enumerate(scans):
        pts = as_cloud(cloud)
        if labels is not None:
            lab = np.asarray(labels[i]).astype(np.int64)
            if len(lab) != len(pts):
                raise PipelineError(f"scan {i}: {len(lab)} labels for {len(pts)} points")
            pts = pts[~np.isin(lab, moving)]
        parts.append(transform(pts, pose))
    world = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
    if config.dedup_resolution is not None:
        world = dedup_voxels(world, config.dedup_resolution)
    return world


def make_pair(scan, pose: RigidPose, world_map, config: PipelineConfig | None = None,
              seed: int = 0) -> ScenePair:
    """Training/evaluation pair in the scan's own frame."""
    config = config or PipelineConfig()
    config.validate()
    world_map = as_cloud(world_map)
    if len(world_map) == 0:
        raise EmptyInputError("ground-truth map is empty")
    cropped = crop_range(scan, config.range_m)
    if len(cropped) < config.n_input:
        raise RegionTooSparseError(
            f"scan holds {len(cropped)} points within {config.range_m} m, need {config.n_input}")
    local = transform(world_map, pose.inverse())
    region = local[range_mask(local, config.range_m)]
    if len(region) < config.n_gt:
        raise RegionTooSparseError(
            f"map region holds {len(region)} points within {config.range_m} m, need {config.n_gt}")
    return ScenePair(
        input=fps(cropped, config.n_input, seed),
        gt=sample_without_replacement(region, config.n_gt, seed),
        center_pose=pose,
    )


@dataclass
class SceneSpec:
    """Parameters of a synthetic street-like scene: a ground plane plus boxes."""

    extent: float = 12.0  # half side of the square ground patch, meters
    n_boxes: int = 4
    box_size: tuple[float, float] = (1.5, 4.0)
    box_height: tuple[float, float] = (1.0, 3.0)
    min_box_distance: float = 3.0
    n_gt: int = 4000
    sensor_height: float = 1.7
    n_azimuth: int = 90
    elevations_deg: tuple[float, ...] = (-24.0, -18.0, -13.0, -9.0, -6.0, -4.0, -2.0, 0.0, 2.0)
    # "rays" casts a ring pattern from the sensor; "fps" takes an FPS subset of the ground truth
    scan_mode: str = "rays"
    n_scan: int = 400

    def validate(self) -> None:
        if self.extent <= 0:
            raise PipelineError("scene extent must be positive")
        if self.n_boxes < 0 or self.n_gt < 1 or self.n_scan < 1:
            raise PipelineError("counts must be positive")
        if self.scan_mode not in ("rays", "fps"):
            raise PipelineError(f"unknown scan mode {self.scan_mode!r}")
        if self.min_box_distance + self.box_size[1] > self.extent:
            raise PipelineError("extent too small for the requested boxes")


def scene_boxes(spec: SceneSpec, seed: int) -> np.ndarray:
    """Axis-aligned boxes as an ``(n, 2, 3)`` array of (lo, hi) corners."""
    spec.validate()
    rng = np.random.default_rng([seed, 1])
    boxes = []
    while len(boxes) < spec.n_boxes:
        sx, sy = rng.uniform(*spec.box_size, size=2)
        h = rng.uniform(*spec.box_height)
        lim = spec.extent - max(sx, sy) / 2
        cx, cy = rng.uniform(-lim, lim, size=2)
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        hi = np.array([cx + sx / 2, cy + sy / 2, h])
        # keep the sensor column clear
        gap = np.maximum(np.maximum(lo[:2], -hi[:2]), 0.0)
        if np.hypot(*gap) < spec.min_box_distance:
            continue
        boxes.append((lo, hi))
    return np.array(boxes, dtype=np.float64).reshape(-1, 2, 3)


def _sample_rect(rng, n, origin, u, v):
    a, b = rng.random((2, n))
    return origin + a[:, None] * u + b[:, None] * v


def _inside_footprints(xy, boxes):
    inside = np.zeros(len(xy), dtype=bool)
    for lo, hi in boxes:
        inside |= np.all((xy >= lo[:2]) & (xy <= hi[:2]), axis=1)
    return inside


def _dense_surface(spec: SceneSpec, boxes: np.ndarray, rng) -> np.ndarray:
    e = spec.extent
    faces = [(np.array([-e, -e, 0.0]), np.array([2 * e, 0, 0]), np.array([0, 2 * e, 0]), "ground")]
    for lo, hi in boxes:
        dx, dy, dz = hi - lo
        X, Y, Z = np.eye(3)
        faces += [
            (lo + dz * Z, dx * X, dy * Y, "top"),
            (lo, dx * X, dz * Z, "side"),
            (lo + dy * Y, dx * X, dz * Z, "side"),
            (lo, dy * Y, dz * Z, "side"),
            (lo + dx * X, dy * Y, dz * Z, "side"),
        ]
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v, _ in faces])
    counts = rng.multinomial(spec.n_gt, areas / areas.sum())
    parts = []
    for (o, u, v, kind), n in zip(faces, counts):
        pts = _sample_rect(rng, n, o, u, v)
        if kind == "ground" and len(boxes):
            # ground under a box is not a visible surface; resample those points
            bad = _inside_footprints(pts[:, :2], boxes)
            while bad.any():
                pts[bad] = _sample_rect(rng, int(bad.sum()), o, u, v)
                bad = _inside_footprints(pts[:, :2], boxes)
        parts.append(pts)
    return np.concatenate(parts, axis=0)


def cast_rays(origin, directions, boxes: np.ndarray, extent: float) -> np.ndarray:
    """First hits of rays against the ground plane z=0 and the boxes; misses dropped."""
    d = np.asarray(directions, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    t_hit = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, -o[2] / d[:, 2], np.inf)
        g = o + tg[:, None] * d
        tg = np.where(np.all(np.abs(g[:, :2]) <= extent, axis=1), tg, np.inf)
        t_hit = np.minimum(t_hit, tg)
        inv = 1.0 / d
        for lo, hi in boxes:
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
            t_near = np.nanmax(np.minimum(t1, t2), axis=1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=1)
            ok = (t_near <= t_far) & (t_near > 0)
            t_hit = np.where(ok & (t_near < t_hit), t_near, t_hit)
    hit = np.isfinite(t_hit)
    return o + t_hit[hit, None] * d[hit]


def ring_directions(spec: SceneSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2])
    az = np.linspace(0, 2 * np.pi, spec.n_azimuth, endpoint=False) + rng.uniform(0, 2 * np.pi)
    el = np.deg2rad(np.asarray(spec.elevations_deg, dtype=np.float64))
    A, E = np.meshgrid(az, el)
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def sensor_pose(spec: SceneSpec) -> RigidPose:
    return RigidPose(np.eye(3), np.array([0.0, 0.0, spec.sensor_height]))


def generate_synthetic_scene(spec: SceneSpec | None = None, seed: int = 0):
    """Dense ground truth and a sparse scan of one synthetic scene, both in the scene frame.

    The ground plane sits at z=0 and the sensor at ``(0, 0, sensor_height)``.
    """
    spec = spec or SceneSpec()
    spec.validate()
    boxes = scene_boxes(spec, seed)
    rng = np.random.default_rng([seed, 0])
    gt = _dense_surface(spec, boxes, rng)
    if spec.scan_mode == "fps":
        scan = fps(gt, min(spec.n_scan, len(gt)), seed)
    else:
        scan = cast_rays(sensor_pose(spec).translation, ring_directions(spec, seed), boxes, spec.extent)
        if len(scan) == 0:
            raise GeometryError("synthetic scan produced no hits")
    return gt, scan


def synthetic_pair(spec: SceneSpec, seed: int, config: PipelineConfig) -> ScenePair:
    gt, scan = generate_synthetic_scene(spec, seed)
    pose = sensor_pose(spec)
    return make_pair(transform(scan, pose.inverse()), pose, gt, config, seed)
