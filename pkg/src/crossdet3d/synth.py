"""Synthetic driving scenes and a size-biased detector simulator.

The simulated detector finds cars well (centres and headings are only
slightly perturbed) but predicts box sizes from the size distribution of the
domain it was "trained" on, not from the car in front of it.  Evaluating it
on scenes from another domain reproduces the gap that size corrections are
meant to close.

Randomness is keyed by integer tuples such as ``(seed, scene_index, stream)``
through :class:`numpy.random.SeedSequence`, so any scene can be regenerated
alone and results do not depend on how work is split across processes.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .adaptation import SizeStats, assign_gt_sizes, output_transform, preset_stats, size_delta
from .conversion import CategoryMap, ConvertOptions, convert_frame, filter_frustum
from .evaluation import (Difficulty, DifficultySpec, EvalSettings, Setting, evaluate,
                         iou_threshold_sweep, sweep_curve)
from .geometry import Box3D, iou_bev, points_in_box_mask
from .kitti_io import (Calibration, FrameBundle, ObjectLabel, PointCloud, RawFrame, RawObject,
                       Frame, camera_to_lidar)

IMAGE_SIZE = (1242, 375)
FOCAL = 707.0
CAMERA_HEIGHT = 1.65
DEPTH_RANGE = (5.0, 70.0)
PLACEMENT_RETRIES = 100
# Surface samples sit this fraction of a dimension inside the box faces.
SURFACE_INSET = 0.01

SeedLike = Union[int, Sequence[int]]


def _rng(seed: SeedLike, *stream: int) -> np.random.Generator:
    key = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    return np.random.default_rng(np.random.SeedSequence(key + [int(s) for s in stream]))


@dataclass(frozen=True)
class DomainProfile:
    name: str
    size_mean: tuple[float, float, float]
    size_std: tuple[float, float, float] = (0.0, 0.0, 0.0)
    points_per_car_at_10m: int = 600
    density_falloff_exponent: float = 2.0
    scene_car_count_range: tuple[int, int] = (4, 10)
    ground_points: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "size_mean", tuple(float(v) for v in self.size_mean))
        object.__setattr__(self, "size_std", tuple(float(v) for v in self.size_std))
        object.__setattr__(self, "scene_car_count_range", tuple(int(v) for v in self.scene_car_count_range))
        lo, hi = self.scene_car_count_range
        if min(self.size_mean) <= 0 or min(self.size_std) < 0:
            raise ValueError(f"{self.name}: size means must be > 0 and stds >= 0")
        if self.points_per_car_at_10m < 0 or self.ground_points < 0 or not 0 <= lo <= hi:
            raise ValueError(f"{self.name}: counts must be non-negative with min <= max")

    def with_size(self, mean, std=None) -> "DomainProfile":
        return DomainProfile(self.name, tuple(mean), self.size_std if std is None else tuple(std),
                             self.points_per_car_at_10m, self.density_falloff_exponent,
                             self.scene_car_count_range, self.ground_points)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DomainProfile":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


_STD = (0.08, 0.10, 0.25)

# Means from the per-dataset car statistics; densities only need the rough
# ordering (nuScenes sparse, Waymo dense).
PROFILE_PRESETS: dict[str, DomainProfile] = {
    name: DomainProfile(name, preset_stats(name).mean, _STD, ppc)
    for name, ppc in (("kitti", 600), ("argoverse", 500), ("nuscenes", 120), ("lyft", 700),
                      ("waymo", 1200))
}


def load_profile(spec: str | Path) -> DomainProfile:
    """A preset name or a path to a JSON profile."""
    if str(spec).lower() in PROFILE_PRESETS:
        return PROFILE_PRESETS[str(spec).lower()]
    return DomainProfile.from_dict(json.loads(Path(spec).read_text()))


def synthetic_calibration() -> Calibration:
    p2 = np.array([[FOCAL, 0.0, IMAGE_SIZE[0] / 2, 0.0],
                   [0.0, FOCAL, IMAGE_SIZE[1] / 2, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])
    # velodyne x forward, y left, z up; mounted slightly behind and above the camera
    tr = np.array([[0.0, -1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0, -0.08],
                   [1.0, 0.0, 0.0, -0.27]])
    return Calibration.from_projection(p2, np.eye(3), tr)


def sample_sizes(profile: DomainProfile, normals: np.ndarray) -> np.ndarray:
    """Gaussian sizes from standard normals, clamped to half the mean."""
    mean = np.array(profile.size_mean)
    sizes = mean + np.array(profile.size_std) * np.asarray(normals)
    return np.maximum(sizes, 0.5 * mean)


def _face_samples(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the camera-facing faces (bottom excluded), in the camera frame."""
    if n <= 0:
        return np.zeros((0, 3))
    hl, hw, h = box.l / 2, box.w / 2, box.h
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x, y, z = box.location
    # (fixed axis, sign, area, outward normal in camera frame)
    faces = [
        (0, +1, box.w * h, (c, 0.0, -s)), (0, -1, box.w * h, (-c, 0.0, s)),
        (1, +1, box.l * h, (s, 0.0, c)), (1, -1, box.l * h, (-s, 0.0, -c)),
        (2, +1, box.l * box.w, (0.0, -1.0, 0.0)),
    ]
    center = np.array([x, y - h / 2, z])
    half = np.array([hl, hw, h / 2])
    visible = []
    for axis, sign, area, normal in faces:
        offset = np.array(normal) * half[axis]
        if np.dot(normal, center + offset) < 0:
            visible.append((axis, sign, area))
    if not visible:
        return np.zeros((0, 3))
    areas = np.array([a for _, _, a in visible])
    per_face = rng.multinomial(n, areas / areas.sum())
    inset = 1.0 - SURFACE_INSET
    chunks = []
    for (axis, sign, _), k in zip(visible, per_face):
        if k == 0:
            continue
        r = rng.uniform(-inset, inset, size=(k, 3))
        r[:, axis] = sign * inset
        u, v, sc = r[:, 0] * hl, r[:, 1] * hw, (r[:, 2] + 1.0) * h / 2
        chunks.append(np.stack([x + u * c + v * s, y - sc, z - u * s + v * c], axis=1))
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


class PlacementError(RuntimeError):
    pass


def generate_scene(profile: DomainProfile, seed: SeedLike, frame_id: str = "000000") -> FrameBundle:
    """A random frame of non-overlapping cars on flat ground, KITTI-labelled."""
    rng = _rng(seed, 0)
    calib = synthetic_calibration()
    proj = calib.camera(*IMAGE_SIZE)
    lo, hi = profile.scene_car_count_range
    n_cars = int(rng.integers(lo, hi + 1))
    half_fov = (IMAGE_SIZE[0] / 2) / FOCAL
    boxes: list[Box3D] = []
    for k in range(n_cars):
        for _ in range(PLACEMENT_RETRIES):
            h, w, l = sample_sizes(profile, rng.standard_normal(3))
            z = rng.uniform(*DEPTH_RANGE)
            x = rng.uniform(-0.9, 0.9) * half_fov * z
            yaw = rng.uniform(-math.pi, math.pi)
            box = Box3D((x, CAMERA_HEIGHT, z), h, w, l, yaw)
            if not filter_frustum(box, proj):
                continue
            if any(iou_bev(box, other) > 0.0 for other in boxes):
                continue
            boxes.append(box)
            break
        else:
            raise PlacementError(f"could not place car {k + 1} of {n_cars} without overlap "
                                 f"after {PLACEMENT_RETRIES} tries")

    chunks = []
    for box in boxes:
        depth = max(box.location.z, 1.0)
        n_pts = int(round(profile.points_per_car_at_10m * (10.0 / depth) ** profile.density_falloff_exponent))
        chunks.append(_face_samples(box, n_pts, rng))
    if profile.ground_points:
        gz = rng.uniform(0.0, DEPTH_RANGE[1] + 10, size=profile.ground_points)
        gx = rng.uniform(-1.0, 1.0, size=profile.ground_points) * half_fov * np.maximum(gz, 1.0)
        # 5 cm below box bottoms so ground never counts as car points
        chunks.append(np.stack([gx, np.full_like(gx, CAMERA_HEIGHT + 0.05), gz], axis=1))
    xyz = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    intensity = rng.uniform(0.0, 1.0, size=(len(xyz), 1))
    cam_cloud = PointCloud(np.hstack([xyz, intensity]), Frame.CAMERA)
    cloud = camera_to_lidar(cam_cloud, calib)

    raw = RawFrame(frame_id, IMAGE_SIZE, calib, [RawObject("Car", b) for b in boxes], cloud)
    return convert_frame(raw, CategoryMap({"Car"}), ConvertOptions()).bundle


@dataclass(frozen=True)
class BiasedDetectorConfig:
    trained_on: DomainProfile
    center_noise_std: float = 0.08
    yaw_noise_std: float = 0.02
    miss_rate: float = 0.1
    # fraction of the true size that leaks into the prediction (0: pure training prior)
    size_leak: float = 0.2
    # logistic score in log(1 + points): 1 / (1 + exp(-slope * (log1p(n) - log(midpoint))))
    score_slope: float = 1.5
    score_midpoint: float = 20.0

    def __post_init__(self):
        if self.center_noise_std < 0 or self.yaw_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0.0 <= self.miss_rate < 1.0:
            raise ValueError("miss_rate must be in [0, 1)")
        if not 0.0 <= self.size_leak <= 1.0:
            raise ValueError("size_leak must be in [0, 1]")


def detection_score(num_points: int, config: BiasedDetectorConfig) -> float:
    t = config.score_slope * (math.log1p(num_points) - math.log(config.score_midpoint))
    return 1.0 / (1.0 + math.exp(-t))


def simulate_detector(frame: FrameBundle, config: BiasedDetectorConfig, seed: SeedLike,
                      category: str = "Car") -> list[ObjectLabel]:
    """One detection per ground-truth car unless missed, sized from the training domain.

    The same number of variates is drawn per car whatever the config, so two
    detectors simulated with one seed share misses, pose noise and scores and
    differ only in predicted sizes.
    """
    rng = _rng(seed, 1)
    size_rng = _rng(seed, 2)
    cam = frame.camera_cloud().xyz
    dets = []
    for lab in frame.labels:
        if lab.category != category:
            continue
        u_miss = rng.random()
        noise = rng.standard_normal(4)
        z_size = size_rng.standard_normal(3)
        if u_miss < config.miss_rate:
            continue
        prior = sample_sizes(config.trained_on, z_size)
        h, w, l = prior + config.size_leak * (np.array([lab.h, lab.w, lab.l]) - prior)
        x, y, z = lab.x, lab.y, lab.z
        sd = config.center_noise_std
        box = Box3D((x + sd * noise[0], y + sd * noise[1], z + sd * noise[2]), h, w, l,
                    lab.rotation_y + config.yaw_noise_std * noise[3])
        n_pts = int(points_in_box_mask(cam, lab.box).sum()) if len(cam) else 0
        dets.append(ObjectLabel.from_box(category, box, bbox2d=lab.bbox2d,
                                         score=detection_score(n_pts, config)))
    return dets


EXPERIMENT_SETTING = Setting(difficulty=Difficulty.MODERATE)


@dataclass
class ExperimentReport:
    source: str
    target: str
    n_scenes: int
    seed: int
    delta: tuple[float, float, float]
    iou_threshold: float
    setting: str
    ap_direct: float
    ap_ot: float
    ap_gt_size: float
    ap_matched: float
    sweep_thresholds: list[float] = field(default_factory=list)
    sweep_direct: list[float] = field(default_factory=list)
    sweep_matched: list[float] = field(default_factory=list)
    mean_pred_size_direct: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mean_gt_size: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "source": self.source, "target": self.target, "n_scenes": self.n_scenes,
            "seed": self.seed, "delta": list(self.delta), "iou_threshold": self.iou_threshold,
            "setting": self.setting, "task": "3d",
            "ap_direct": self.ap_direct, "ap_ot": self.ap_ot, "ap_gt_size": self.ap_gt_size,
            "ap_matched": self.ap_matched,
            "mean_pred_size_direct": list(self.mean_pred_size_direct),
            "mean_gt_size": list(self.mean_gt_size),
            "sweep": {"thresholds": self.sweep_thresholds, "direct": self.sweep_direct,
                      "matched": self.sweep_matched},
        }

    def sweep_csv(self) -> str:
        rows = ["iou_threshold,ap_direct,ap_matched"]
        rows += [f"{t!r},{d!r},{m!r}" for t, d, m in
                 zip(self.sweep_thresholds, self.sweep_direct, self.sweep_matched)]
        return "\n".join(rows) + "\n"


def _scene_job(args):
    source, target, seed, index, det_kwargs = args
    fid = f"{index:06d}"
    frame = generate_scene(target, (seed, index), fid)
    direct = simulate_detector(frame, BiasedDetectorConfig(source, **det_kwargs), (seed, index))
    matched = simulate_detector(frame, BiasedDetectorConfig(target, **det_kwargs), (seed, index))
    return fid, frame.labels, direct, matched


def run_adaptation_experiment(source: DomainProfile, target: DomainProfile, n_scenes: int,
                              seed: int, *, iou_threshold: float = 0.7,
                              sweep_thresholds: Sequence[float] | None = None,
                              detector: Mapping | None = None, workers: int = 1,
                              ot_scale: float = 1.0) -> ExperimentReport:
    """Direct / OT / GT-size / matched AP on ``n_scenes`` target-domain scenes."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    det_kwargs = dict(detector or {})
    jobs = [(source, target, int(seed), i, det_kwargs) for i in range(n_scenes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_scene_job, jobs, chunksize=max(1, n_scenes // (4 * workers))))
    else:
        results = [_scene_job(j) for j in jobs]

    delta = size_delta(profile_stats(target), profile_stats(source))
    gts = {fid: labels for fid, labels, _, _ in results}
    direct = {fid: d for fid, _, d, _ in results}
    matched = {fid: m for fid, _, _, m in results}
    ot = {fid: output_transform(d, delta, ot_scale) for fid, d in direct.items()}
    gt_size = {fid: assign_gt_sizes(gts[fid], d) for fid, d in direct.items()}

    spec = DifficultySpec()
    settings = EvalSettings(iou_threshold=iou_threshold, tasks=("3d",),
                            settings=(EXPERIMENT_SETTING,))
    setting = EXPERIMENT_SETTING.name

    def ap(dets):
        return evaluate(gts, dets, spec, settings).ap(setting, "3d")

    thresholds = [round(0.05 * i, 10) for i in range(21)] if sweep_thresholds is None else list(sweep_thresholds)
    sweep_d = sweep_curve(iou_threshold_sweep(gts, direct, thresholds, spec, settings), setting)
    sweep_m = sweep_curve(iou_threshold_sweep(gts, matched, thresholds, spec, settings), setting)

    def mean_size(frames):
        rows = [(d.h, d.w, d.l) for labs in frames.values() for d in labs if d.category == "Car"]
        if not rows:
            return (0.0, 0.0, 0.0)
        return tuple(math.fsum(r[k] for r in rows) / len(rows) for k in range(3))

    return ExperimentReport(
        source=source.name, target=target.name, n_scenes=n_scenes, seed=int(seed),
        delta=delta.as_tuple(), iou_threshold=iou_threshold, setting=setting,
        ap_direct=ap(direct), ap_ot=ap(ot), ap_gt_size=ap(gt_size), ap_matched=ap(matched),
        sweep_thresholds=[t for t, _ in sweep_d], sweep_direct=[a for _, a in sweep_d],
        sweep_matched=[a for _, a in sweep_m],
        mean_pred_size_direct=mean_size(direct), mean_gt_size=mean_size(gts))


def profile_stats(profile: DomainProfile) -> SizeStats:
    """Size statistics of a profile's car distribution."""
    return SizeStats("Car", *profile.size_mean, *profile.size_std)
