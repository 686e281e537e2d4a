from __future__ import annotations


import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import car, finite, sn_frame, spaced_boxes
from crossdet3d.adaptation import (CAR_SIZE_PRESETS, PEDESTRIAN_SIZE_PRESETS, SizeDelta,
                                   SizeStats, assign_gt_sizes, compute_size_stats,
                                   output_transform, point_count_stats, pooled_mean_stats,
                                   preset_stats, size_delta, size_histograms,
                                   statistical_normalize_frame)
from crossdet3d.geometry import Box3D, from_box_frame, iou_3d, points_in_box_mask
from crossdet3d.kitti_io import Frame, FrameBundle, ObjectLabel, PointCloud
from crossdet3d.synth import synthetic_calibration

CALIB = synthetic_calibration()


# statistics and deltas --------------------------------------------------------

def test_size_stats_examples():
    s = compute_size_stats([car(h=1.5, w=1.6, l=3.8), car(h=1.5, w=1.6, l=4.0),
                            car(category="Truck", l=9.0)])
    assert s.mean == pytest.approx((1.5, 1.6, 3.9), abs=1e-15)
    assert s.count == 2
    assert s.std == pytest.approx((0.0, 0.0, 0.1), abs=1e-12)
    one = compute_size_stats([car(h=1.4, w=1.7, l=4.4)])
    assert one.std == (0.0, 0.0, 0.0) and one.mean == (1.4, 1.7, 4.4)
    with pytest.raises(ValueError):
        compute_size_stats([car(category="Van")])


@given(st.lists(st.tuples(*[st.floats(0.5, 6, **finite)] * 3), min_size=1, max_size=40),
       st.randoms())
def test_size_stats_order_insensitive(dims, rnd):
    labels = [car(h=h, w=w, l=l) for h, w, l in dims]
    shuffled = labels[:]
    rnd.shuffle(shuffled)
    assert compute_size_stats(labels).to_dict() == compute_size_stats(shuffled).to_dict()


@given(st.sampled_from(sorted(CAR_SIZE_PRESETS)), st.integers(1, 500))
def test_identical_sizes_have_exact_mean(name, n):
    h, w, l = CAR_SIZE_PRESETS[name]
    s = compute_size_stats([car(h=h, w=w, l=l)] * n)
    assert s.mean == (h, w, l)


def test_size_stats_json_round_trip():
    s = compute_size_stats([car(l=3.8), car(l=4.1)])
    d = s.to_dict()
    assert set(d) == {"category", "mean", "std", "count"}
    assert SizeStats.from_dict(d) == s


def test_presets():
    assert CAR_SIZE_PRESETS["kitti"] == (1.53, 1.62, 3.89)
    assert CAR_SIZE_PRESETS["argoverse"] == (1.69, 1.96, 4.51)
    assert CAR_SIZE_PRESETS["nuscenes"] == (1.73, 1.96, 4.64)
    assert CAR_SIZE_PRESETS["lyft"] == (1.71, 1.91, 4.73)
    assert CAR_SIZE_PRESETS["waymo"] == (1.79, 2.11, 4.80)
    assert preset_stats("kitti", "Pedestrian").mean == (1.76, 0.66, 0.84)
    assert set(PEDESTRIAN_SIZE_PRESETS) == {"kitti", "argoverse", "nuscenes", "lyft", "waymo"}


def test_delta_us_datasets_vs_kitti():
    us = pooled_mean_stats(["argoverse", "nuscenes", "lyft", "waymo"])
    assert us.mean == pytest.approx((1.73, 1.985, 4.67), abs=1e-12)
    d = size_delta(us, preset_stats("kitti"))
    assert d.as_tuple() == pytest.approx((0.20, 0.37, 0.78), abs=0.01)


def test_delta_car_sales_exact():
    d = size_delta(preset_stats("usa-sales"), preset_stats("germany-sales"))
    assert d.as_tuple() == (0.26, 0.14, 0.75)


def test_delta_identity_antisymmetry_and_category():
    k = preset_stats("kitti")
    assert size_delta(k, k).is_zero
    for a in CAR_SIZE_PRESETS:
        for b in CAR_SIZE_PRESETS:
            ab = size_delta(preset_stats(a), preset_stats(b))
            ba = size_delta(preset_stats(b), preset_stats(a))
            assert ab.as_tuple() == (-ba).as_tuple()
    with pytest.raises(ValueError):
        size_delta(k, preset_stats("kitti", "Pedestrian"))


# output transformation ----------------------------------------------------------

def test_ot_waymo_example():
    det = car(h=1.53, w=1.62, l=3.89, x=2.0, z=31.0, yaw=0.4, score=0.7)
    d = size_delta(preset_stats("waymo"), preset_stats("kitti"))
    assert d.as_tuple() == (0.26, 0.49, 0.91)
    (out,) = output_transform([det], d)
    assert (out.h, out.w, out.l) == (1.79, 2.11, 4.80)
    assert (out.x, out.y, out.z, out.rotation_y) == (det.x, det.y, det.z, det.rotation_y)
    assert out.bbox2d == det.bbox2d and out.score == det.score


def test_ot_identity_and_errors():
    dets = [car(score=0.5), car(category="Pedestrian", h=1.7, w=0.6, l=0.8, score=0.4)]
    assert output_transform(dets, SizeDelta(0, 0, 0)) == dets
    with pytest.raises(ValueError, match="detection 0"):
        output_transform(dets, SizeDelta(0, 0, -5))
    # other categories untouched
    assert output_transform(dets, SizeDelta(0.1, 0.1, 0.1))[1] == dets[1]
    scaled = output_transform(dets, SizeDelta(0.2, 0.2, 0.4), scale=0.5)[0]
    assert (scaled.h, scaled.w, scaled.l) == (1.6, 1.7, 4.1)


grid = st.integers(300_000, 8_000_000).map(lambda k: k / 1_000_000)


@given(grid, grid, grid, st.tuples(*[st.floats(-0.25, 0.25, **finite)] * 3))
def test_ot_inverse_is_exact(h, w, l, d):
    det = car(h=h, w=w, l=l, score=0.3)
    delta = SizeDelta(*d)
    (back,) = output_transform(output_transform([det], delta), -delta)
    assert (back.h, back.w, back.l) == (h, w, l)


# GT-size assignment ---------------------------------------------------------------

def test_gt_size_rules():
    gt = car(h=1.6, w=1.7, l=4.2)
    far = car(x=3.2, l=4.0, score=0.9)
    assert iou_3d(gt.box, far.box) < 0.2
    near = car(x=1.0, l=3.0, yaw=0.1, score=0.8)
    assert 0.2 < iou_3d(gt.box, near.box)
    out = assign_gt_sizes([gt], [far, near])
    assert out[0] == far
    assert (out[1].h, out[1].w, out[1].l) == (1.6, 1.7, 4.2)
    assert (out[1].x, out[1].y, out[1].z, out[1].rotation_y) == (near.x, near.y, near.z, near.rotation_y)


def test_gt_size_picks_best_iou_then_lowest_index():
    a, b = car(x=0.0, l=4.0), car(x=0.0, l=4.0, h=1.2)
    det = car(x=0.0, l=3.9, score=0.5)
    (out,) = assign_gt_sizes([b, a], [det])
    assert out.h == 1.5  # a overlaps more
    (out,) = assign_gt_sizes([a, car(x=0.0, l=4.0)], [det])
    assert out.l == 4.0


def test_gt_size_never_lowers_iou_when_aligned(rng):
    for _ in range(200):
        g = car(h=rng.uniform(1.3, 2), w=rng.uniform(1.5, 2.2), l=rng.uniform(3.5, 5.2),
                yaw=rng.uniform(-3, 3))
        d = car(x=g.x, y=g.y, z=g.z, yaw=g.rotation_y, h=rng.uniform(1.3, 2),
                w=rng.uniform(1.5, 2.2), l=rng.uniform(3.5, 5.2), score=0.5)
        before = iou_3d(g.box, d.box)
        (after,) = assign_gt_sizes([g], [d])
        assert iou_3d(g.box, after.box) >= before


# statistical normalisation -----------------------------------------------------

def test_sn_point_example():
    box = Box3D((0, 1.6, 20), 1.5, 1.6, 3.9, 0.0)
    p = from_box_frame(np.array([[1.95, 0, 0]]), box)
    fr = FrameBundle("f", PointCloud(np.hstack([p, [[0.5]]]), Frame.CAMERA), CALIB,
                     [ObjectLabel.from_box("Car", box)])
    out = statistical_normalize_frame(fr, SizeDelta(0.3, 0.4, 0.9))
    np.testing.assert_allclose(out.cloud.points[0, :3], from_box_frame(np.array([[2.4, 0, 0]]), box)[0],
                               atol=1e-12)
    lab = out.labels[0]
    assert (lab.h, lab.w, lab.l) == (1.8, 2.0, 4.8)
    assert (lab.x, lab.y, lab.z, lab.rotation_y) == (0, 1.6, 20, 0.0)


def test_sn_zero_delta_is_bit_identical(rng):
    fr = sn_frame(spaced_boxes(rng), rng)
    out = statistical_normalize_frame(fr, SizeDelta(0, 0, 0))
    assert out.cloud.points.tobytes() == fr.cloud.points.tobytes()
    assert out.labels == fr.labels


@pytest.mark.parametrize("lidar", [True, False])
def test_sn_invariants(rng, lidar):
    boxes = spaced_boxes(rng)
    fr = sn_frame(boxes, rng, lidar=lidar)
    delta = SizeDelta(0.26, 0.49, 0.91)
    out = statistical_normalize_frame(fr, delta)
    before = fr.camera_cloud().xyz
    after = out.camera_cloud().xyz
    new_boxes = [l.box for l in out.labels if l.category == "Car"]
    inside = np.zeros(len(before), bool)
    for old, new in zip(boxes, new_boxes):
        m_old = points_in_box_mask(before, old)
        inside |= m_old
        # conservation and membership in the resized box
        assert m_old.sum() == points_in_box_mask(after[m_old], new).sum() == 200
    # points outside every original box are bit-identical
    assert out.cloud.points[~inside].tobytes() == fr.cloud.points[~inside].tobytes()
    assert len(out.cloud) == len(fr.cloud)
    # non-target labels untouched
    assert out.labels[-1] == fr.labels[-1]

    # reverse with the delta mapping new sizes back to the old ones
    back = statistical_normalize_frame(out, -delta)
    assert [l.box for l in back.labels] == [l.box for l in fr.labels]
    err = np.abs(back.camera_cloud().xyz[inside] - before[inside]).max()
    assert err < 1e-9


def test_sn_overlapping_boxes_claim_once(rng):
    near = Box3D((0, 1.6, 10), 1.5, 1.6, 3.9, 0.0)
    far = Box3D((1.0, 1.6, 10.5), 1.5, 1.6, 3.9, 0.0)
    shared = np.array([[0.5, 1.0, 10.2]])
    assert points_in_box_mask(shared, near).all() and points_in_box_mask(shared, far).all()
    fr = FrameBundle("f", PointCloud(np.hstack([shared, [[0.1]]]), Frame.CAMERA), CALIB,
                     [ObjectLabel.from_box("Car", far), ObjectLabel.from_box("Car", near)])
    out = statistical_normalize_frame(fr, SizeDelta(0.0, 0.0, 1.0))
    # near box (z=10) scales the point about its own bottom centre along x
    expected = 0.0 + 0.5 * (4.9 / 3.9)
    assert out.cloud.points[0, 0] == pytest.approx(expected, abs=1e-12)


def test_sn_rejects_non_positive():
    fr = FrameBundle("f", PointCloud.empty(), CALIB, [car()])
    with pytest.raises(ValueError, match="label 0"):
        statistical_normalize_frame(fr, SizeDelta(-2, 0, 0))


def test_sn_label_means_hit_target(rng):
    src, tgt = preset_stats("kitti"), preset_stats("waymo")
    fr = sn_frame(spaced_boxes(rng), rng)
    out = statistical_normalize_frame(fr, size_delta(tgt, src))
    assert compute_size_stats(out.labels).mean == tgt.mean
    us = pooled_mean_stats(["argoverse", "nuscenes", "lyft", "waymo"])
    out = statistical_normalize_frame(fr, size_delta(us, src))
    assert compute_size_stats(out.labels).mean == pytest.approx(us.mean, abs=1e-12)


# point counts and histograms --------------------------------------------------

def test_point_counts_empty_and_constructed():
    empty = FrameBundle("e", PointCloud.empty(), CALIB, [])
    assert point_count_stats([empty]) == point_count_stats([empty]).__class__(0.0, 0.0, 0, 1)
    box = Box3D((0, 1.6, 15), 1.5, 1.6, 3.9)
    local = np.column_stack([np.linspace(-1.5, 1.5, 12), np.zeros(12), np.full(12, 0.7)])
    cloud = PointCloud(np.hstack([from_box_frame(local, box), np.zeros((12, 1))]), Frame.CAMERA)
    fr = FrameBundle("c", cloud, CALIB, [ObjectLabel.from_box("Car", box)])
    stats = point_count_stats([fr])
    assert stats.per_car == 12 and stats.per_scene == 12


def test_point_counts_scene_matches_brute_force(rng):
    fr = sn_frame(spaced_boxes(rng), rng, outside=3000)
    cam = fr.camera_cloud().xyz
    proj = fr.camera
    n = 0
    for p in cam:
        if p[2] <= 0:
            continue
        u, v, _ = proj.matrix @ np.append(p, 1.0)
        d = (proj.matrix @ np.append(p, 1.0))[2]
        if 0 <= u / d <= proj.image_width and 0 <= v / d <= proj.image_height:
            n += 1
    assert point_count_stats([fr]).per_scene == n


def test_histograms():
    one = size_histograms([car(h=1.5, w=1.6, l=3.9)], 0.25)
    for d in ("h", "w", "l"):
        assert len(one.counts[d]) == 1 and one.total(d) == 1
    assert one.edges("h") == [(1.5, 1.75, 1)]  # bins are half-open on the right


@given(st.lists(st.tuples(*[st.floats(0.5, 6, **finite)] * 3), max_size=50),
       st.sampled_from([0.05, 0.1, 0.2, 0.5]))
def test_histogram_totals_and_refinement(dims, bw):
    labels = [car(h=h, w=w, l=l) for h, w, l in dims]
    coarse, fine = size_histograms(labels, bw), size_histograms(labels, bw / 2)
    for d in ("h", "w", "l"):
        assert coarse.total(d) == fine.total(d) == len(labels)
