"""Point-cloud primitives.

Clouds are ``(N, 3)`` float64 arrays in meters. Per-point labels, when a
caller has them, travel as a separate ``(N,)`` integer array; every operation
here that reorders or filters points either preserves order or returns the
indices needed to carry labels along.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


class InvalidPoseError(GeometryError):
    pass


class EmptyInputError(GeometryError):
    pass


class SizeError(GeometryError):
    pass


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) point array, got shape {pts.shape}")
    return pts


def _workers() -> int:
    # PCDF_THREADS=0 (or unset) lets scipy use every core
    n = int(os.environ.get("PCDF_THREADS", "0") or 0)
    return -1 if n <= 0 else n


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidPoseError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPoseError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidPoseError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Pose equivalent to applying ``other`` first, then ``self``."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class VoxelGrid:
    resolution: float
    keys: np.ndarray  # (K, 3) int64, unique rows, lexicographically sorted

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def occupied(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in k) for k in self.keys}

    def centers(self) -> np.ndarray:
        return (self.keys.astype(np.float64) + 0.5) * self.resolution


def transform(points, pose: RigidPose) -> np.ndarray:
    if not isinstance(pose, RigidPose):
        pose = RigidPose(*pose)
    pts = as_cloud(points)
    return pts @ pose.rotation.T + pose.translation


def range_mask(points, r_max: float) -> np.ndarray:
    if r_max <= 0:
        raise GeometryError("r_max must be positive")
    pts = as_cloud(points)
    return np.linalg.norm(pts, axis=1) <= r_max


def crop_range(points, r_max: float) -> np.ndarray:
    """Keep points whose 3D distance from the origin is at most ``r_max``."""
    pts = as_cloud(points)
    return pts[range_mask(pts, r_max)]


def fps_indices(points, k: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts from index ``seed % N``; each further pick maximizes the distance
    to the already selected set, ties going to the lowest index.
    """
    pts = as_cloud(points)
    n = len(pts)
    if n == 0:
        raise EmptyInputError("farthest point sampling on an empty cloud")
    if not 1 <= k <= n:
        raise SizeError(f"cannot pick {k} points from a cloud of {n}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed % n
    min_d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))  # argmax returns the first maximum
        chosen[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return chosen


def fps(points, k: int, seed: int = 0) -> np.ndarray:
    pts = as_cloud(points)
    return pts[fps_indices(pts, k, seed)]


def voxel_keys(points, resolution: float) -> np.ndarray:
    if not resolution > 0:
        raise GeometryError("voxel resolution must be positive")
    pts = as_cloud(points)
    return np.floor(pts / resolution).astype(np.int64)


def voxelize(points, resolution: float) -> VoxelGrid:
    keys = voxel_keys(points, resolution)
    if len(keys):
        keys = np.unique(keys, axis=0)
    return VoxelGrid(float(resolution), keys.reshape(-1, 3))


def nearest_neighbor(queries, reference) -> tuple[np.ndarray, np.ndarray]:
    """Index of and Euclidean distance to the closest reference point per query.

    Exact ties resolve to the lowest reference index.
    """
    q = as_cloud(queries)
    ref = as_cloud(reference)
    if len(ref) == 0:
        raise EmptyInputError("nearest neighbor lookup against an empty reference")
    if len(q) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if len(ref) == 1:
        return np.zeros(len(q), dtype=np.int64), np.sqrt(np.sum((q - ref[0]) ** 2, axis=1))

    tree = cKDTree(ref)
    dist, idx = tree.query(q, k=2, workers=_workers())
    out_idx = idx[:, 0].astype(np.int64)
    out_dist = dist[:, 0]
    # the tree does not promise an order among equidistant points
    tied = np.nonzero(dist[:, 0] == dist[:, 1])[0]
    for i in tied:
        d = np.sqrt(np.sum((ref - q[i]) ** 2, axis=1))
        j = int(np.argmin(d))
        out_idx[i] = j
        out_dist[i] = d[j]
    return out_idx, out_dist


def replicate(points, K: int) -> np.ndarray:
    """Concatenate ``K`` copies of the cloud, copy 0 first."""
    if K < 1:
        raise GeometryError("replication factor must be at least 1")
    return np.tile(as_cloud(points), (K, 1))


def sample_indices(n: int, m: int, seed: int) -> np.ndarray:
    if m > n:
        raise SizeError(f"cannot draw {m} points without replacement from {n}")
    return np.random.default_rng(seed).choice(n, size=m, replace=False)


def sample_without_replacement(points, m: int, seed: int) -> np.ndarray:
    pts = as_cloud(points)
    return pts[sample_indices(len(pts), m, seed)]
