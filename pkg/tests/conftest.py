from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from crossdet3d.geometry import Box3D, from_box_frame, points_in_box_mask
from crossdet3d.kitti_io import Frame, FrameBundle, ObjectLabel, PointCloud, camera_to_lidar
from crossdet3d.synth import synthetic_calibration

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

FIX = Path(__file__).parent / "fixtures"
CORPUS = FIX / "corpus"
SYNTH_CALIB = synthetic_calibration()

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return report


def car(x=0.0, y=1.6, z=20.0, h=1.5, w=1.6, l=3.9, yaw=0.0, *, score=None, occlusion=0,
        truncation=0.0, bbox=(100.0, 100.0, 200.0, 200.0), category="Car") -> ObjectLabel:
    return ObjectLabel.from_box(category, Box3D((x, y, z), h, w, l, yaw), truncation=truncation,
                                occlusion=occlusion, bbox2d=bbox, score=score)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


finite = dict(allow_nan=False, allow_infinity=False)
coords = st.floats(-50, 50, **finite)
sizes = st.floats(0.2, 6.0, **finite)
yaws = st.floats(-math.pi, math.pi, **finite)


@st.composite
def boxes(draw, spread=50.0):
    c = st.floats(-spread, spread, **finite)
    return Box3D((draw(c), draw(c), draw(c)), draw(sizes), draw(sizes), draw(sizes), draw(yaws))


def mc_membership(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Independent containment test: rotate points into the box frame with an
    explicit rotation matrix about the camera y axis."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # columns: box length axis, width axis expressed in camera (x, z)
    d = points - np.array(box.location)
    u = d[:, 0] * c - d[:, 2] * s
    v = d[:, 0] * s + d[:, 2] * c
    up = -d[:, 1]
    return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2) & (up >= 0) & (up <= box.h)


def mc_iou(a: Box3D, b: Box3D, n: int, rng: np.random.Generator) -> float:
    ca, cb = _corners_hull(a), _corners_hull(b)
    lo = np.minimum(ca[0], cb[0])
    hi = np.maximum(ca[1], cb[1])
    pts = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = mc_membership(pts, a), mc_membership(pts, b)
    inter = np.count_nonzero(ia & ib)
    union = np.count_nonzero(ia | ib)
    return inter / union if union else 0.0


def _corners_hull(box: Box3D):
    r = math.hypot(box.l, box.w) / 2
    x, y, z = box.location
    return np.array([x - r, y - box.h, z - r]), np.array([x + r, y, z + r])


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def sn_frame(boxes, rng, per_box=200, outside=500, lidar=True):
    """Cars with points inside them, background points clear of every box,
    and one pedestrian label that SN must leave alone."""
    pts = []
    for b in boxes:
        local = rng.uniform(-0.5, 0.5, (per_box, 3)) * [b.l, b.w, 0]
        local[:, 2] = rng.uniform(0, b.h, per_box)
        pts.append(from_box_frame(local, b))
    bg = rng.uniform([-30, -2, 0], [30, 3, 80], (outside, 3))
    keep = np.ones(len(bg), bool)
    for b in boxes:
        keep &= ~points_in_box_mask(bg, b, tol=0.6)
    pts.append(bg[keep])
    xyz = np.vstack(pts)
    cloud = PointCloud(np.hstack([xyz, rng.uniform(0, 1, (len(xyz), 1))]), Frame.CAMERA)
    if lidar:
        cloud = camera_to_lidar(cloud, SYNTH_CALIB)
    labels = [ObjectLabel.from_box("Car", b) for b in boxes]
    labels.append(car(x=-12, z=30, category="Pedestrian", h=1.7, w=0.6, l=0.8))
    return FrameBundle("f", cloud, SYNTH_CALIB, labels)


def spaced_boxes(rng, n=4):
    return [Box3D((-15 + 9 * i + rng.uniform(-1, 1), 1.65, 10 + 12 * i), 1.53, 1.62, 3.89,
                  rng.uniform(-3, 3)) for i in range(n)]


def cli_commands(tmp: Path, tag: str):
    o = tmp / tag
    o.mkdir()
    return [
        ["convert", FIX / "raw", o / "convert", "--dataset", "argoverse"],
        ["eval", "--gt", CORPUS, "--det", CORPUS / "detections", "--output", o / "eval.json"],
        ["eval", "--gt", CORPUS, "--det", CORPUS / "detections", "--sweep",
         "--output", o / "sweep.json"],
        ["stats", CORPUS, "--points", "--hist-bin", "0.1", "--output", o / "stats.json"],
        ["sn", CORPUS, o / "sn", "--presets", "waymo", "kitti"],
        ["ot", CORPUS / "detections", o / "ot", "--presets", "kitti", "waymo"],
        ["gt-size", "--gt", CORPUS, "--det", CORPUS / "detections", "--output", o / "gs"],
        ["synth", "--source", "kitti", "--target", "waymo", "--seed", 3, "--scenes", 8,
         "--output", o / "synth.json", "--sweep-csv", o / "sweep.csv"],
        ["synth-scenes", "--profile", "nuscenes", "--scenes", 5, "--seed", 2,
         "--detector", "lyft", "--output", o / "scenes"],
    ]
