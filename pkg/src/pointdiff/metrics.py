"""Completion metrics: chamfer distance, BEV Jensen-Shannon divergence, occupancy IoU."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import EmptyInputError, GeometryError, as_cloud, nearest_neighbor, voxelize

DEFAULT_IOU_RESOLUTIONS = (0.5, 0.2, 0.1)


def _nonempty(points, name: str) -> np.ndarray:
    pts = as_cloud(points)
    if len(pts) == 0:
        raise EmptyInputError(f"{name} is empty")
    return pts


def chamfer_distance(A, B) -> float:
    """Symmetric chamfer distance in meters (non-squared, averaged over both directions)."""
    A = _nonempty(A, "first cloud")
    B = _nonempty(B, "second cloud")
    _, d_ab = nearest_neighbor(A, B)
    _, d_ba = nearest_neighbor(B, A)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def bev_histogram(points, resolution: float) -> dict[tuple[int, int], int]:
    """Occupied voxels per (x, y) column."""
    grid = voxelize(points, resolution)
    cols, counts = np.unique(grid.keys[:, :2], axis=0, return_counts=True)
    return {(int(c[0]), int(c[1])): int(n) for c, n in zip(cols, counts)}


def js_divergence(p, q) -> float:
    """Natural-log Jensen-Shannon divergence of two aligned distributions.

    Clamped to [0, ln 2]; summation rounding can otherwise step an ulp outside.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), math.log(2.0))


def jsd_bev(A, B, resolution: float = 0.5) -> float:
    A = _nonempty(A, "first cloud")
    B = _nonempty(B, "second cloud")
    ha = bev_histogram(A, resolution)
    hb = bev_histogram(B, resolution)
    cols = sorted(set(ha) | set(hb))
    p = np.array([ha.get(c, 0) for c in cols], dtype=np.float64)
    q = np.array([hb.get(c, 0) for c in cols], dtype=np.float64)
    return js_divergence(p / p.sum(), q / q.sum())


def _key_view(keys: np.ndarray) -> np.ndarray:
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    return keys.view([("x", np.int64), ("y", np.int64), ("z", np.int64)]).ravel()


def occupancy_iou(A, B, resolutions=DEFAULT_IOU_RESOLUTIONS) -> dict[float, float]:
    A = _nonempty(A, "first cloud")
    B = _nonempty(B, "second cloud")
    out = {}
    for res in resolutions:
        if not res > 0:
            raise GeometryError(f"bad IoU resolution {res}")
        ka = _key_view(voxelize(A, res).keys)
        kb = _key_view(voxelize(B, res).keys)
        inter = len(np.intersect1d(ka, kb, assume_unique=True))
        union = len(ka) + len(kb) - inter
        out[float(res)] = inter / union
    return out


def _fmt_res(res: float) -> str:
    return f"{res:g}"


@dataclass
class MetricReport:
    cd: float
    jsd_bev: float
    iou: dict[float, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        d = {"cd": self.cd, "jsd_bev": self.jsd_bev}
        for res, v in self.iou.items():
            d[f"iou@{_fmt_res(res)}"] = v
        return d

    def to_kv(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.as_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    @classmethod
    def from_kv(cls, text: str) -> "MetricReport":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            vals[k.strip()] = float(v)
        iou = {float(k[4:]): v for k, v in vals.items() if k.startswith("iou@")}
        return cls(vals["cd"], vals["jsd_bev"], iou)


def evaluate(pred, gt, iou_resolutions=DEFAULT_IOU_RESOLUTIONS,
             jsd_resolution: float = 0.5) -> MetricReport:
    return MetricReport(
        cd=chamfer_distance(pred, gt),
        jsd_bev=jsd_bev(pred, gt, jsd_resolution),
        iou=occupancy_iou(pred, gt, iou_resolutions),
    )
