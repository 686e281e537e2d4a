"""Turn intermediate annotations into KITTI labels.

Pipeline per frame: category remapping -> frustum/depth filtering -> 2D box
from projected corners -> truncation from cropped vs. uncropped 2D box ->
occlusion by painting 2D boxes far-to-near on an integer canvas.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3D, CameraProjection, box_corners, project_points
from .kitti_io import FrameBundle, ObjectLabel, RawFrame, RawObject, observation_angle

MAX_DEPTH = 70.0

__all__ = [
    "CategoryMap", "CATEGORY_PRESETS", "DropReason", "RawObject", "ConvertOptions",
    "map_category", "filter_frustum", "frustum_drop_reason", "compute_2d_bbox",
    "compute_truncation", "compute_occlusions", "occlusion_level", "rasterize_box",
    "convert_frame", "ConvertedFrame",
]


@dataclass(frozen=True)
class CategoryMap:
    car_sources: frozenset = frozenset()
    truck_sources: frozenset = frozenset()
    passthrough: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "car_sources", frozenset(self.car_sources))
        object.__setattr__(self, "truck_sources", frozenset(self.truck_sources))
        overlap = self.car_sources & self.truck_sources
        if overlap:
            raise ValueError(f"categories mapped to both Car and Truck: {sorted(overlap)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoryMap":
        return cls(frozenset(d.get("car", ())), frozenset(d.get("truck", ())),
                   dict(d.get("passthrough", {})))


# Source taxonomies folded into KITTI's Car / Truck.  Waymo labels every
# vehicle as a car, so nothing maps to Truck there.
CATEGORY_PRESETS: dict[str, CategoryMap] = {
    "kitti": CategoryMap({"Car"}, {"Truck"}, {"Van": "Van", "Pedestrian": "Pedestrian",
                                             "Cyclist": "Cyclist", "DontCare": "DontCare"}),
    "argoverse": CategoryMap({"VEHICLE"}, {"LARGE_VEHICLE", "BUS", "TRAILER", "SCHOOL_BUS"}),
    "nuscenes": CategoryMap({"car"}, {"bus", "trailer", "construction_vehicle", "truck"}),
    "lyft": CategoryMap({"Car"}, {"other_vehicle", "truck", "bus", "emergency_vehicle"}),
    "waymo": CategoryMap({"Car"}, set()),
}


def map_category(cmap: CategoryMap, source: str) -> str | None:
    """KITTI category for ``source``, or None when the object is dropped."""
    if source in cmap.car_sources:
        return "Car"
    if source in cmap.truck_sources:
        return "Truck"
    return cmap.passthrough.get(source)


class DropReason(str, enum.Enum):
    CATEGORY = "dropped_category"
    FRUSTUM = "dropped_frustum"
    DEPTH = "dropped_depth"


def _corner_pixels(box: Box3D, proj: CameraProjection):
    uvd, valid = project_points(proj, box_corners(box))
    return uvd, valid


def frustum_drop_reason(box: Box3D, proj: CameraProjection,
                        max_depth: float = MAX_DEPTH) -> DropReason | None:
    uvd, valid = _corner_pixels(box, proj)
    inside = valid & proj.in_image(np.nan_to_num(uvd[:, 0], nan=-1.0),
                                   np.nan_to_num(uvd[:, 1], nan=-1.0))
    if not inside.any():
        return DropReason.FRUSTUM
    if box.location.z > max_depth:
        return DropReason.DEPTH
    return None


def filter_frustum(obj, proj: CameraProjection, max_depth: float = MAX_DEPTH) -> bool:
    """True when at least one corner projects into the image and depth <= max_depth."""
    box = getattr(obj, "box3d", obj)
    return frustum_drop_reason(box, proj, max_depth) is None


BBox = tuple[float, float, float, float]


def compute_2d_bbox(obj, proj: CameraProjection) -> tuple[BBox, BBox]:
    """Return ``(cropped, uncropped)`` 2D boxes from the projected corners.

    Only corners in front of the camera contribute; the cropped box is the
    uncropped one clamped to the image rectangle.
    """
    box = getattr(obj, "box3d", obj)
    uvd, valid = _corner_pixels(box, proj)
    if not valid.any():
        raise ValueError("no box corner lies in front of the camera")
    px, py = uvd[valid, 0], uvd[valid, 1]
    ux1, uy1, ux2, uy2 = float(px.min()), float(py.min()), float(px.max()), float(py.max())
    w, h = proj.image_width, proj.image_height
    x1, y1 = min(max(ux1, 0.0), float(w)), min(max(uy1, 0.0), float(h))
    x2, y2 = max(min(ux2, float(w)), 0.0), max(min(uy2, float(h)), 0.0)
    # Only reachable when the frustum precondition is violated: collapse, never invert.
    cropped = (x1, y1, max(x1, x2), max(y1, y2))
    return cropped, (ux1, uy1, ux2, uy2)


def _area(b: BBox) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def compute_truncation(cropped: BBox, uncropped: BBox) -> float:
    """Fraction of the uncropped 2D box lying outside the image.

    Degenerate boxes (zero cropped or uncropped area) count as fully truncated.
    """
    full = _area(uncropped)
    kept = _area(cropped)
    if full <= 0.0 or kept <= 0.0:
        return 1.0
    return min(1.0, max(0.0, 1.0 - kept / full))


def rasterize_box(bbox: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel extent ``[x1, x2) x [y1, y2)``, rounded half-up and clipped."""
    def rnd(v: float) -> int:
        return int(math.floor(v + 0.5))

    x1, y1, x2, y2 = (rnd(v) for v in bbox)
    x1, x2 = min(max(x1, 0), width), min(max(x2, 0), width)
    y1, y2 = min(max(y1, 0), height), min(max(y2, 0), height)
    return x1, y1, max(x1, x2), max(y1, y2)


def occlusion_level(occluded_pixels: int, total_pixels: int) -> int:
    """Quartile bin of the occluded fraction: [0,.25)->0 ... [.75,1]->3."""
    if total_pixels <= 0:
        return 0
    return min(3, (4 * occluded_pixels) // total_pixels)


def compute_occlusions(bboxes: Sequence[BBox], depths: Sequence[float], width: int,
                       height: int) -> list[tuple[float, int]]:
    """Per object ``(occluded fraction, level)`` by far-to-near painting.

    Objects are painted in descending depth (equal depths: lower index first)
    onto a canvas initialised to -1; an object's visible pixels are those
    still carrying its id afterwards.
    """
    if len(bboxes) != len(depths):
        raise ValueError("bboxes and depths differ in length")
    canvas = np.full((height, width), -1, dtype=np.int32)
    rects = [rasterize_box(b, width, height) for b in bboxes]
    order = sorted(range(len(rects)), key=lambda i: (-depths[i], i))
    for i in order:
        x1, y1, x2, y2 = rects[i]
        canvas[y1:y2, x1:x2] = i
    out = []
    for i, (x1, y1, x2, y2) in enumerate(rects):
        total = (x2 - x1) * (y2 - y1)
        if total == 0:
            out.append((0.0, 0))
            continue
        visible = int(np.count_nonzero(canvas[y1:y2, x1:x2] == i))
        occluded = total - visible
        out.append((occluded / total, occlusion_level(occluded, total)))
    return out


@dataclass(frozen=True)
class ConvertOptions:
    max_depth: float = MAX_DEPTH
    camera_index: int = 2


@dataclass(eq=False)
class ConvertedFrame:
    bundle: FrameBundle
    counts: dict[str, int]
    occlusion_fractions: list[float]


def convert_frame(raw: RawFrame, cmap: CategoryMap,
                  options: ConvertOptions = ConvertOptions()) -> ConvertedFrame:
    proj = raw.calib.camera(*raw.image_size, index=options.camera_index)
    counts = {"kept": 0, DropReason.CATEGORY.value: 0, DropReason.FRUSTUM.value: 0,
              DropReason.DEPTH.value: 0}
    survivors: list[tuple[str, Box3D]] = []
    for obj in raw.objects:
        category = map_category(cmap, obj.source_category)
        if category is None:
            counts[DropReason.CATEGORY.value] += 1
            continue
        reason = frustum_drop_reason(obj.box3d, proj, options.max_depth)
        if reason is not None:
            counts[reason.value] += 1
            continue
        survivors.append((category, obj.box3d))
    counts["kept"] = len(survivors)

    boxes2d = [compute_2d_bbox(box, proj) for _, box in survivors]
    occl = compute_occlusions([c for c, _ in boxes2d], [b.location.z for _, b in survivors],
                              proj.image_width, proj.image_height)
    labels = []
    for (category, box), (cropped, uncropped), (_, level) in zip(survivors, boxes2d, occl):
        labels.append(ObjectLabel.from_box(
            category, box, truncation=compute_truncation(cropped, uncropped), occlusion=level,
            alpha=observation_angle(box), bbox2d=cropped))
    bundle = FrameBundle(raw.frame_id, raw.cloud, raw.calib, labels, raw.image_size)
    return ConvertedFrame(bundle, counts, [f for f, _ in occl])
