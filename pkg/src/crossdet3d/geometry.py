"""Oriented 3D box geometry in the KITTI rectified camera frame.

Conventions used everywhere in the package:

* camera frame: x right, y down, z forward (meters);
* a box is anchored at the centre of its *bottom* face, so the box spans
  ``[y - h, y]`` vertically;
* ``yaw`` is KITTI's ``rotation_y``: a rotation about the camera y axis.  At
  ``yaw == 0`` the length axis points along +x and the width axis along +z.
  A box-local point ``(u, v, s)`` (u along length, v along width, s up from
  the bottom face) maps to camera coordinates as::

      x = cx + u * cos(yaw) + v * sin(yaw)
      y = cy - s
      z = cz - u * sin(yaw) + v * cos(yaw)

  so ``yaw = pi/2`` turns the +length direction onto -z.

Bird's-eye-view polygons live in the ``(x, z)`` plane.  Counter-clockwise in
that plane is counter-clockwise when looking down from above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

# Intersection areas below this are treated as empty (shared edges, touching corners).
MIN_AREA = 1e-9
# Slack for closed-box membership so corners survive rotation round-off.
BOUNDARY_TOL = 1e-9


class Vec3(NamedTuple):
    x: float
    y: float
    z: float


def wrap_angle(angle: float) -> float:
    """Wrap an angle into ``(-pi, pi]``."""
    a = math.remainder(angle, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    location: Vec3
    h: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        loc = Vec3(*(float(c) for c in self.location))
        if not all(math.isfinite(c) for c in loc):
            raise ValueError(f"box location must be finite, got {loc}")
        dims = (float(self.h), float(self.w), float(self.l))
        if not all(math.isfinite(d) and d > 0 for d in dims):
            raise ValueError(f"box dimensions must be positive, got h,w,l={dims}")
        if not math.isfinite(self.yaw):
            raise ValueError(f"box yaw must be finite, got {self.yaw}")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "h", dims[0])
        object.__setattr__(self, "w", dims[1])
        object.__setattr__(self, "l", dims[2])
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.h, self.w, self.l)

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    @property
    def center(self) -> Vec3:
        """Volumetric centre (half a height above the anchor)."""
        x, y, z = self.location
        return Vec3(x, y - self.h / 2.0, z)

    def resized(self, h: float, w: float, l: float) -> "Box3D":
        """Same bottom centre and yaw, new dimensions."""
        return Box3D(self.location, h, w, l, self.yaw)

    def translated(self, dx: float, dy: float, dz: float) -> "Box3D":
        x, y, z = self.location
        return Box3D((x + dx, y + dy, z + dz), self.h, self.w, self.l, self.yaw)


@dataclass(frozen=True)
class CameraProjection:
    """A 3x4 pinhole projection plus the image it projects into."""

    matrix: np.ndarray = field(repr=False)
    image_width: int = 1242
    image_height: int = 375

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(m)):
            raise ValueError("projection matrix must be finite")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_intrinsics(cls, fx: float, fy: float, cx: float, cy: float,
                        width: int = 1242, height: int = 375) -> "CameraProjection":
        m = np.array([[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(m, width, height)

    @property
    def f_v(self) -> float:
        return float(self.matrix[1, 1])

    @property
    def principal_point(self) -> tuple[float, float]:
        return float(self.matrix[0, 2]), float(self.matrix[1, 2])

    def in_image(self, px, py):
        """Closed-rectangle test ``[0, width] x [0, height]``."""
        return (px >= 0) & (px <= self.image_width) & (py >= 0) & (py <= self.image_height)


def box_corners(box: Box3D) -> np.ndarray:
    """Return the 8 corners as an (8, 3) array.

    Rows 0-3 are the bottom face, counter-clockwise seen from above, starting
    at the (+length, +width) corner; rows 4-7 are the top face in the same
    order.
    """
    half_l, half_w = box.l / 2.0, box.w / 2.0
    u = np.array([half_l, -half_l, -half_l, half_l] * 2)
    v = np.array([half_w, half_w, -half_w, -half_w] * 2)
    s = np.array([0.0] * 4 + [box.h] * 4)
    c, sn = math.cos(box.yaw), math.sin(box.yaw)
    x, y, z = box.location
    return np.stack([x + u * c + v * sn, y - s, z - u * sn + v * c], axis=1)


def bev_polygon(box: Box3D) -> list[tuple[float, float]]:
    """Footprint in the (x, z) plane, counter-clockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x, _, z = box.location
    hl, hw = box.l / 2.0, box.w / 2.0
    return [(x + u * c + v * s, z - u * s + v * c)
            for u, v in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return acc / 2.0


def clip_convex(subject: Sequence[tuple[float, float]],
                clip: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` against convex ``clip``.

    Both polygons must be counter-clockwise.  Points on a clip edge count as
    inside, so identical polygons clip to themselves.
    """
    output = list(subject)
    if not output or len(clip) < 3:
        return []
    ax, ay = clip[-1]
    for bx, by in clip:
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        if not inp:
            break
        px, py = inp[-1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for qx, qy in inp:
            q_side = ex * (qy - ay) - ey * (qx - ax)
            if q_side >= 0:
                if p_side < 0:
                    t = p_side / (p_side - q_side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif p_side >= 0:
                if p_side > 0:
                    t = p_side / (p_side - q_side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, p_side = qx, qy, q_side
        ax, ay = bx, by
    return output


def _bev_overlap(a: Box3D, b: Box3D) -> tuple[float, float, float]:
    """(intersection area, area a, area b) of the two footprints."""
    pa, pb = bev_polygon(a), bev_polygon(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    # Circumscribed circles that do not touch cannot overlap.
    dx = a.location.x - b.location.x
    dz = a.location.z - b.location.z
    ra = math.hypot(a.l, a.w) / 2.0
    rb = math.hypot(b.l, b.w) / 2.0
    if dx * dx + dz * dz > (ra + rb) ** 2:
        return 0.0, area_a, area_b
    inter = polygon_area(clip_convex(pa, pb))
    if inter < MIN_AREA:
        inter = 0.0
    return min(inter, area_a, area_b), area_a, area_b


def _ratio(inter: float, size_a: float, size_b: float) -> float:
    if inter <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / (size_a + size_b - inter)))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated IoU of the two footprints in the ground plane."""
    inter, area_a, area_b = _bev_overlap(a, b)
    return _ratio(inter, area_a, area_b)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    top = max(a.location.y - a.h, b.location.y - b.h)
    bottom = min(a.location.y, b.location.y)
    return max(0.0, bottom - top)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: footprint intersection times vertical overlap."""
    dy = vertical_overlap(a, b)
    if dy <= 0.0:
        return 0.0
    inter, area_a, area_b = _bev_overlap(a, b)
    return _ratio(inter * dy, area_a * a.h, area_b * b.h)


def to_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Camera-frame (N, >=3) points to box-local (u, v, s) coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = box.location
    dx, dy, dz = pts[:, 0] - x, pts[:, 1] - y, pts[:, 2] - z
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return np.stack([c * dx - s * dz, s * dx + c * dz, -dy], axis=1)


def from_box_frame(local: np.ndarray, box: Box3D) -> np.ndarray:
    """Inverse of :func:`to_box_frame`."""
    local = np.asarray(local, dtype=np.float64)
    u, v, s_up = local[:, 0], local[:, 1], local[:, 2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x, y, z = box.location
    return np.stack([x + u * c + v * s, y - s_up, z - u * s + v * c], axis=1)


def points_in_box_mask(points: np.ndarray, box: Box3D, tol: float = BOUNDARY_TOL) -> np.ndarray:
    local = to_box_frame(points, box)
    return ((np.abs(local[:, 0]) <= box.l / 2.0 + tol)
            & (np.abs(local[:, 1]) <= box.w / 2.0 + tol)
            & (local[:, 2] >= -tol) & (local[:, 2] <= box.h + tol))


def points_in_box(points, box: Box3D, tol: float = BOUNDARY_TOL) -> np.ndarray:
    """Indices of camera-frame points inside the closed box.

    ``points`` is an (N, >=3) array or anything with a ``.points`` array
    (a :class:`~crossdet3d.kitti_io.PointCloud` already in the camera frame).
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.size == 0:
        return np.zeros(0, dtype=np.int64)
    pts = np.atleast_2d(pts)
    return np.flatnonzero(points_in_box_mask(pts, box, tol))


def project_points(proj: CameraProjection, points) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points through ``proj``.

    Returns ``(uvd, valid)``: an (N, 3) array of (px, py, depth) and a boolean
    mask.  Points with depth <= 0 are marked invalid and get NaN pixels
    instead of mirrored coordinates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    img = hom @ proj.matrix.T
    depth = img[:, 2]
    valid = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.where(valid, img[:, 0] / depth, np.nan)
        py = np.where(valid, img[:, 1] / depth, np.nan)
    return np.stack([px, py, depth], axis=1), valid


def depth_for_pixel_height(f_v: float, object_height: float, pixel_height: float) -> float:
    """Depth at which an object of ``object_height`` meters spans ``pixel_height`` px."""
    if pixel_height <= 0:
        raise ValueError("pixel_height must be positive")
    return f_v * object_height / pixel_height


def pixel_height_at_depth(f_v: float, object_height: float, depth: float) -> float:
    if depth <= 0:
        raise ValueError("depth must be positive")
    return f_v * object_height / depth
