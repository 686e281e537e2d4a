from __future__ import annotations

import math

import numpy as np
import pytest

from crossdet3d.conversion import (CATEGORY_PRESETS, CategoryMap, ConvertOptions, DropReason,
                                   compute_2d_bbox, compute_occlusions, compute_truncation,
                                   convert_frame, filter_frustum, frustum_drop_reason,
                                   map_category, occlusion_level)
from crossdet3d.geometry import Box3D, CameraProjection, box_corners, project_points
from crossdet3d.kitti_io import Calibration, RawFrame, RawObject

PROJ = CameraProjection.from_intrinsics(707, 707, 621, 187.5, 1242, 375)


def brute_force_occlusion(rects, depths):
    """Per-pixel count: a pixel of object i is hidden when some object painted
    after it (nearer, or equally near with a larger index) covers it."""
    out = []
    for i, (x1, y1, x2, y2) in enumerate(rects):
        total = hidden = 0
        for py in range(y1, y2):
            for px in range(x1, x2):
                total += 1
                for j, (a1, b1, a2, b2) in enumerate(rects):
                    later = depths[j] < depths[i] or (depths[j] == depths[i] and j > i)
                    if j != i and later and a1 <= px < a2 and b1 <= py < b2:
                        hidden += 1
                        break
        out.append((hidden, total))
    return out


def test_category_presets():
    assert map_category(CATEGORY_PRESETS["argoverse"], "VEHICLE") == "Car"
    assert map_category(CATEGORY_PRESETS["nuscenes"], "construction_vehicle") == "Truck"
    assert CATEGORY_PRESETS["waymo"].truck_sources == frozenset()
    assert map_category(CATEGORY_PRESETS["waymo"], "Truck") is None
    assert map_category(CATEGORY_PRESETS["lyft"], "bicycle") is None
    with pytest.raises(ValueError):
        CategoryMap({"a"}, {"a"})
    assert CategoryMap.from_dict({"car": ["x"], "passthrough": {"p": "Pedestrian"}}) == \
        CategoryMap({"x"}, set(), {"p": "Pedestrian"})


def test_frustum_filter():
    ahead = Box3D((0, 1.6, 20), 1.5, 1.6, 3.9)
    assert filter_frustum(ahead, PROJ)
    assert frustum_drop_reason(Box3D((0, 1.6, -20), 1.5, 1.6, 3.9), PROJ) is DropReason.FRUSTUM
    assert frustum_drop_reason(Box3D((0, 1.6, 71), 1.5, 1.6, 3.9), PROJ) is DropReason.DEPTH
    assert filter_frustum(Box3D((0, 1.6, 70), 1.5, 1.6, 3.9), PROJ)
    assert not filter_frustum(Box3D((60, 1.6, 10), 1.5, 1.6, 3.9), PROJ)


def test_2d_bbox_inside_and_clamped():
    cropped, uncropped = compute_2d_bbox(Box3D((0, 1.6, 20), 1.5, 1.6, 3.9), PROJ)
    assert cropped == uncropped
    uvd, _ = project_points(PROJ, box_corners(Box3D((0, 1.6, 20), 1.5, 1.6, 3.9)))
    assert uncropped == (uvd[:, 0].min(), uvd[:, 1].min(), uvd[:, 0].max(), uvd[:, 1].max())

    # 200-wide image, corners spanning x in [-50, 50] pixels
    proj = CameraProjection.from_intrinsics(100, 100, 0, 50, 200, 100)
    box = Box3D((0, 0.5, 10), 1.0, 1e-6, 10.0)  # length along x: +-5 m at 10 m -> +-50 px
    cropped, uncropped = compute_2d_bbox(box, proj)
    assert uncropped[0] == pytest.approx(-50, abs=1e-3)
    assert cropped[0] == 0.0
    assert cropped[2] == pytest.approx(50, abs=1e-3)


def test_2d_bbox_single_visible_corner_and_no_corner():
    # Only corners with positive depth contribute; a box straddling the image
    # plane keeps the visible ones.
    box = Box3D((0, 1.0, 0.0), 1.0, 1.0, 1.0, math.pi / 4)
    cropped, _ = compute_2d_bbox(box, PROJ)
    assert cropped[0] <= cropped[2] and cropped[1] <= cropped[3]
    with pytest.raises(ValueError):
        compute_2d_bbox(Box3D((0, 1.0, -10), 1, 1, 1), PROJ)


def test_truncation():
    assert compute_truncation((10, 10, 50, 50), (10, 10, 50, 50)) == 0.0
    assert compute_truncation((0, 0, 50, 100), (-50, 0, 50, 100)) == 0.5
    assert compute_truncation((0, 0, 0, 100), (-50, 0, 0, 100)) == 1.0
    assert compute_truncation((0, 0, 0, 0), (0, 0, 0, 0)) == 1.0


def test_occlusion_examples():
    assert compute_occlusions([(10, 10, 50, 50)], [20], 200, 100) == [(0.0, 0)]
    far_full = compute_occlusions([(20, 20, 40, 40), (0, 0, 100, 100)], [50, 10], 200, 100)
    assert far_full[0] == (1.0, 3) and far_full[1] == (0.0, 0)
    half = compute_occlusions([(50, 0, 150, 100), (0, 0, 100, 100)], [40, 10], 200, 100)
    assert half[0] == (0.5, 2) and half[1] == (0.0, 0)
    assert compute_occlusions([(5, 5, 5, 9)], [3], 20, 20) == [(0.0, 0)]


def test_occlusion_level_bins():
    assert [occlusion_level(k, 100) for k in (0, 24, 25, 49, 50, 74, 75, 100)] == \
        [0, 0, 1, 1, 2, 2, 3, 3]
    assert occlusion_level(0, 0) == 0


@pytest.mark.parametrize("seed", range(12))
def test_occlusion_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    w, h = 60, 40
    n = int(rng.integers(1, 7))
    bboxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, w), rng.uniform(0, h)
        bboxes.append((x1, y1, rng.uniform(x1, w), rng.uniform(y1, h)))
    depths = [float(rng.integers(5, 9)) for _ in range(n)]  # force depth ties
    got = compute_occlusions(bboxes, depths, w, h)
    rects = [tuple(min(max(int(math.floor(v + 0.5)), 0), lim)
                   for v, lim in zip(b, (w, h, w, h))) for b in bboxes]
    for (frac, level), (hidden, total) in zip(got, brute_force_occlusion(rects, depths)):
        if total == 0:
            assert (frac, level) == (0.0, 0)
        else:
            assert frac == hidden / total
            assert level == min(3, 4 * hidden // total)


def _raw(objects, frame_id="000000"):
    p2 = PROJ.matrix
    return RawFrame(frame_id, (1242, 375), Calibration.from_projection(p2), objects)


def test_convert_single_car():
    box = Box3D((1.0, 1.6, 20.0), 1.5, 1.6, 3.9, 0.2)
    out = convert_frame(_raw([RawObject("VEHICLE", box)]), CATEGORY_PRESETS["argoverse"])
    (lab,) = out.bundle.labels
    assert lab.category == "Car" and lab.box == box
    assert lab.truncation == 0.0 and lab.occlusion == 0
    assert lab.alpha == pytest.approx(0.2 - math.atan2(1.0, 20.0))
    assert lab.bbox2d == compute_2d_bbox(box, PROJ)[0]
    assert out.counts == {"kept": 1, "dropped_category": 0, "dropped_frustum": 0,
                          "dropped_depth": 0}


def test_convert_drops_and_counts():
    objs = [RawObject("PEDESTRIAN", Box3D((0, 1.6, 10), 1.7, 0.6, 0.6)),
            RawObject("VEHICLE", Box3D((0, 1.6, -10), 1.5, 1.6, 3.9)),
            RawObject("BUS", Box3D((0, 1.6, 80), 3, 2.5, 12))]
    out = convert_frame(_raw(objs), CATEGORY_PRESETS["argoverse"])
    assert out.bundle.labels == []
    assert out.counts == {"kept": 0, "dropped_category": 1, "dropped_frustum": 1,
                          "dropped_depth": 1}
    out = convert_frame(_raw(objs[2:]), CATEGORY_PRESETS["argoverse"], ConvertOptions(max_depth=90))
    assert [l.category for l in out.bundle.labels] == ["Truck"]


def test_convert_occlusion_composition(rng):
    for _ in range(5):
        objs = [RawObject("car", Box3D((rng.uniform(-8, 8), 1.6, rng.uniform(6, 60)),
                                       *rng.uniform(1.4, 4.5, 3), rng.uniform(-3, 3)))
                for _ in range(8)]
        out = convert_frame(_raw(objs), CATEGORY_PRESETS["nuscenes"])
        labels = out.bundle.labels
        standalone = compute_occlusions([l.bbox2d for l in labels], [l.z for l in labels],
                                        1242, 375)
        assert [l.occlusion for l in labels] == [lvl for _, lvl in standalone]
        for lab in labels:
            assert lab.z <= 70 and 0 <= lab.truncation <= 1
        nearest = min(range(len(labels)), key=lambda i: labels[i].z)
        assert labels[nearest].occlusion == 0
