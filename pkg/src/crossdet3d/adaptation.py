"""Size statistics and the size-based domain corrections.

* statistical normalisation: resize source-domain boxes by the mean-size
  difference and stretch the points inside them to match;
* output transformation: add the difference to predicted sizes;
* ground-truth size assignment: diagnostic that gives each detection the
  size of the ground-truth car it overlaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box3D, iou_3d, points_in_box_mask, project_points, to_box_frame
from .kitti_io import FrameBundle, ObjectLabel, PointCloud, Frame, transform_points

DIMS = ("h", "w", "l")
SIZE_GRID_DECIMALS = 6


@dataclass(frozen=True)
class SizeStats:
    category: str
    mean_h: float
    mean_w: float
    mean_l: float
    std_h: float = 0.0
    std_w: float = 0.0
    std_l: float = 0.0
    count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("size statistics need at least one object")
        if min(self.mean) <= 0 or min(self.std) < 0:
            raise ValueError(f"invalid size statistics {self}")

    @property
    def mean(self) -> tuple[float, float, float]:
        return (self.mean_h, self.mean_w, self.mean_l)

    @property
    def std(self) -> tuple[float, float, float]:
        return (self.std_h, self.std_w, self.std_l)

    def to_dict(self) -> dict:
        return {"category": self.category, "mean": list(self.mean), "std": list(self.std),
                "count": self.count}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SizeStats":
        (mh, mw, ml), (sh, sw, sl) = d["mean"], d.get("std", (0.0, 0.0, 0.0))
        return cls(d["category"], mh, mw, ml, sh, sw, sl, int(d.get("count", 1)))


@dataclass(frozen=True)
class SizeDelta:
    dh: float
    dw: float
    dl: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"size delta must be finite, got {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dh, self.dw, self.dl)

    def __neg__(self) -> "SizeDelta":
        return SizeDelta(-self.dh, -self.dw, -self.dl)

    def scaled(self, factor: float) -> "SizeDelta":
        return SizeDelta(self.dh * factor, self.dw * factor, self.dl * factor)

    @property
    def is_zero(self) -> bool:
        return self.dh == 0 and self.dw == 0 and self.dl == 0


# Mean car sizes (h, w, l) per dataset, plus regional car-sales averages.
CAR_SIZE_PRESETS: dict[str, tuple[float, float, float]] = {
    "kitti": (1.53, 1.62, 3.89),
    "argoverse": (1.69, 1.96, 4.51),
    "nuscenes": (1.73, 1.96, 4.64),
    "lyft": (1.71, 1.91, 4.73),
    "waymo": (1.79, 2.11, 4.80),
    "germany-sales": (1.49, 1.79, 4.40),
    "usa-sales": (1.75, 1.93, 5.15),
}

# Pedestrian (mean, std) per dimension h, w, l.
PEDESTRIAN_SIZE_PRESETS: dict[str, tuple[tuple[float, float], ...]] = {
    "kitti": ((1.76, 0.11), (0.66, 0.14), (0.84, 0.23)),
    "argoverse": ((1.84, 0.15), (0.78, 0.14), (0.78, 0.14)),
    "nuscenes": ((1.78, 0.18), (0.67, 0.14), (0.73, 0.19)),
    "lyft": ((1.76, 0.18), (0.76, 0.14), (0.78, 0.17)),
    "waymo": ((1.75, 0.20), (0.85, 0.15), (0.90, 0.19)),
}


def preset_stats(name: str, category: str = "Car") -> SizeStats:
    key = name.lower()
    if category == "Pedestrian":
        if key not in PEDESTRIAN_SIZE_PRESETS:
            raise KeyError(f"no pedestrian preset {name!r}")
        (mh, sh), (mw, sw), (ml, sl) = PEDESTRIAN_SIZE_PRESETS[key]
        return SizeStats(category, mh, mw, ml, sh, sw, sl)
    if key not in CAR_SIZE_PRESETS:
        raise KeyError(f"no car preset {name!r}; known: {sorted(CAR_SIZE_PRESETS)}")
    return SizeStats(category, *CAR_SIZE_PRESETS[key])


def pooled_mean_stats(names: Iterable[str], category: str = "Car") -> SizeStats:
    """Unweighted average of several presets' means."""
    stats = [preset_stats(n, category) for n in names]
    mean = [math.fsum(s.mean[k] for s in stats) / len(stats) for k in range(3)]
    return SizeStats(category, *mean, count=len(stats))


def compute_size_stats(labels: Iterable[ObjectLabel], category: str = "Car") -> SizeStats:
    """Mean and population standard deviation of (h, w, l).

    Sums use exactly rounded accumulation of offsets from the smallest value,
    so the result does not depend on label order and a set of identical sizes
    has exactly that size as its mean.
    """
    rows = [(lab.h, lab.w, lab.l) for lab in labels if lab.category == category]
    if not rows:
        raise ValueError(f"no {category!r} labels to compute statistics from")
    n = len(rows)
    base = [min(r[k] for r in rows) for k in range(3)]
    means = [base[k] + math.fsum(r[k] - base[k] for r in rows) / n for k in range(3)]
    stds = [math.sqrt(math.fsum((r[k] - means[k]) ** 2 for r in rows) / n) for k in range(3)]
    return SizeStats(category, *means, *stds, count=n)


def size_delta(target: SizeStats, source: SizeStats) -> SizeDelta:
    """Target mean minus source mean, per dimension, on the micrometre size grid."""
    if target.category != source.category:
        raise ValueError(f"category mismatch: {target.category!r} vs {source.category!r}")
    return SizeDelta(*(round(t - s, SIZE_GRID_DECIMALS) for t, s in zip(target.mean, source.mean)))


def _resized(box: Box3D, delta: SizeDelta, what: str) -> Box3D:
    """Box grown by ``delta``.  New sizes snap to a micrometre grid so that
    adding and then subtracting the same delta gives back on-grid sizes exactly."""
    if delta.is_zero:
        return box
    dims = tuple(round(d + dd, SIZE_GRID_DECIMALS) for d, dd in zip(box.dims, delta.as_tuple()))
    if min(dims) <= 0:
        raise ValueError(f"{what}: resized dimensions h,w,l={dims} are not all positive")
    return box.resized(*dims)


def statistical_normalize_frame(frame: FrameBundle, delta: SizeDelta, category: str = "Car",
                                tol: float = 1e-9) -> FrameBundle:
    """Resize every ``category`` box by ``delta`` and stretch its points along.

    Boxes are handled nearest first; a point inside several boxes belongs to
    the first one.  Points are scaled per axis about the bottom-face centre in
    the box frame, so the bottom centre and yaw stay put.  Points outside all
    resized boxes are returned bit-identical; ``tol`` widens the membership
    test to absorb rounding on box faces.
    """
    targets = [i for i, lab in enumerate(frame.labels) if lab.category == category]
    new_boxes = {i: _resized(frame.labels[i].box, delta,
                             f"label {i} ({category} at z={frame.labels[i].z:g})") for i in targets}
    labels = list(frame.labels)
    for i in targets:
        labels[i] = labels[i].with_box(new_boxes[i])
    if delta.is_zero or len(frame.cloud) == 0:
        return FrameBundle(frame.frame_id, frame.cloud, frame.calib, labels, frame.image_size)

    if frame.cloud.frame == Frame.LIDAR:
        to_cam = frame.calib.lidar_to_cam_matrix()
        cam_xyz = transform_points(frame.cloud.xyz, to_cam)
        # displacements map back through the inverse linear part only
        back = np.linalg.inv(to_cam[:3, :3])
    else:
        cam_xyz = frame.cloud.xyz
        back = None
    claimed = np.zeros(len(cam_xyz), dtype=bool)
    displacement = np.zeros_like(cam_xyz)
    for i in sorted(targets, key=lambda k: (frame.labels[k].z, k)):
        box = frame.labels[i].box
        mask = points_in_box_mask(cam_xyz, box, tol) & ~claimed
        if not mask.any():
            continue
        claimed |= mask
        local = to_box_frame(cam_xyz[mask], box)
        new = new_boxes[i]
        # local axes (u, v, s) are length, width, height
        factors = np.array([new.l / box.l, new.w / box.w, new.h / box.h])
        dlocal = local * (factors - 1.0)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        displacement[mask] = np.stack([dlocal[:, 0] * c + dlocal[:, 1] * s,
                                       -dlocal[:, 2],
                                       -dlocal[:, 0] * s + dlocal[:, 1] * c], axis=1)
    pts = frame.cloud.points.copy()
    moved = claimed & np.any(displacement != 0.0, axis=1)
    step = displacement[moved] if back is None else displacement[moved] @ back.T
    pts[moved, :3] = pts[moved, :3] + step
    cloud = PointCloud(pts, frame.cloud.frame)
    return FrameBundle(frame.frame_id, cloud, frame.calib, labels, frame.image_size)


def output_transform(dets: Sequence[ObjectLabel], delta: SizeDelta, scale: float = 1.0,
                     category: str | None = "Car") -> list[ObjectLabel]:
    """Add ``scale * delta`` to every detection's size (bottom centre and yaw kept)."""
    d = delta.scaled(scale) if scale != 1.0 else delta
    out = []
    for k, det in enumerate(dets):
        if category is not None and det.category != category:
            out.append(det)
            continue
        out.append(det.with_box(_resized(det.box, d, f"detection {k}")))
    return out


def assign_gt_sizes(gts: Sequence[ObjectLabel], dets: Sequence[ObjectLabel], min_iou: float = 0.2,
                    category: str = "Car") -> list[ObjectLabel]:
    """Give each detection overlapping a GT car by more than ``min_iou`` that car's size."""
    gt_boxes = [(j, g.box) for j, g in enumerate(gts) if g.category == category]
    out = []
    for det in dets:
        if det.category != category or not gt_boxes:
            out.append(det)
            continue
        box = det.box
        best_j, best = None, min_iou
        for j, gb in gt_boxes:
            v = iou_3d(box, gb)
            if v > best:
                best_j, best = j, v
        if best_j is None:
            out.append(det)
        else:
            g = gts[best_j]
            out.append(det.with_box(box.resized(g.h, g.w, g.l)))
    return out


@dataclass(frozen=True)
class PointCountStats:
    per_car: float
    per_scene: float
    num_cars: int
    num_scenes: int


def in_view_mask(frame: FrameBundle, cam_xyz: np.ndarray | None = None) -> np.ndarray:
    if cam_xyz is None:
        cam_xyz = frame.camera_cloud().xyz
    proj = frame.camera
    uvd, valid = project_points(proj, cam_xyz)
    px = np.nan_to_num(uvd[:, 0], nan=-1.0)
    py = np.nan_to_num(uvd[:, 1], nan=-1.0)
    return valid & proj.in_image(px, py)


def scene_point_count(frame: FrameBundle) -> int:
    """Points projecting into the image with positive depth."""
    if len(frame.cloud) == 0:
        return 0
    return int(in_view_mask(frame).sum())


def car_point_counts(frame: FrameBundle, category: str = "Car",
                     max_depth: float = 70.0) -> list[int]:
    """In-view points inside each ``category`` box no deeper than ``max_depth``."""
    cars = [lab for lab in frame.labels if lab.category == category and lab.z <= max_depth]
    if len(frame.cloud) == 0:
        return [0] * len(cars)
    cam = frame.camera_cloud().xyz
    visible = cam[in_view_mask(frame, cam)]
    return [int(points_in_box_mask(visible, lab.box).sum()) for lab in cars]


def point_count_stats(frames: Iterable[FrameBundle], category: str = "Car",
                      max_depth: float = 70.0) -> PointCountStats:
    """Mean in-view points per scene and per car (cars within ``max_depth``)."""
    scene_counts: list[int] = []
    car_counts: list[int] = []
    for fr in frames:
        scene_counts.append(scene_point_count(fr))
        car_counts += car_point_counts(fr, category, max_depth)
    per_scene = math.fsum(scene_counts) / len(scene_counts) if scene_counts else 0.0
    per_car = math.fsum(car_counts) / len(car_counts) if car_counts else 0.0
    return PointCountStats(per_car, per_scene, len(car_counts), len(scene_counts))


@dataclass(frozen=True)
class SizeHistogram:
    """Counts per half-open bin ``[k * bin_width, (k + 1) * bin_width)``."""

    bin_width: float
    counts: Mapping[str, Mapping[int, int]]

    def total(self, dim: str) -> int:
        return sum(self.counts[dim].values())

    def edges(self, dim: str) -> list[tuple[float, float, int]]:
        return [(k * self.bin_width, (k + 1) * self.bin_width, c)
                for k, c in sorted(self.counts[dim].items())]

    def to_dict(self) -> dict:
        return {"bin_width": self.bin_width,
                "bins": {d: [[lo, hi, c] for lo, hi, c in self.edges(d)] for d in DIMS}}


def size_histograms(labels: Iterable[ObjectLabel], bin_width: float,
                    category: str | None = "Car") -> SizeHistogram:
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    counts: dict[str, dict[int, int]] = {d: {} for d in DIMS}
    for lab in labels:
        if category is not None and lab.category != category:
            continue
        for d in DIMS:
            k = math.floor(getattr(lab, d) / bin_width)
            counts[d][k] = counts[d].get(k, 0) + 1
    return SizeHistogram(bin_width, counts)
