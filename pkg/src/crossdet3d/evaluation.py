"""Difficulty assignment, detection matching and rotated-IoU average precision.

Two difficulty metrics are supported.  ``OLD_PIXEL`` is the KITTI benchmark
rule (minimum 2D box height 40/25/25 px).  ``NEW_DEPTH`` swaps the pixel
heights for maximum depths of 30/70/70 m so that cameras with different focal
lengths and resolutions partition cars the same way.  Both keep KITTI's
occlusion (0/1/2) and truncation (0.15/0.30/0.50) gates.

Cars are additionally scored in half-open depth bins ``[lo, hi)`` using the
Hard-case occlusion/truncation gates.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import iou_3d, iou_bev
from .kitti_io import DONT_CARE, ObjectLabel


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()


class DifficultyMode(str, enum.Enum):
    OLD_PIXEL = "old"
    NEW_DEPTH = "new"


class TruncationMode(str, enum.Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


def truncation_level(truncation: float) -> int:
    """Quartile level 0..3 of a continuous truncation value."""
    return min(3, int(math.floor(truncation * 4.0)))


@dataclass(frozen=True)
class DifficultySpec:
    mode: DifficultyMode = DifficultyMode.NEW_DEPTH
    min_heights: tuple[float, float, float] = (40.0, 25.0, 25.0)
    max_depths: tuple[float, float, float] = (30.0, 70.0, 70.0)
    max_occlusion: tuple[int, int, int] = (0, 1, 2)
    max_truncation: tuple[float, float, float] = (0.15, 0.30, 0.50)
    # DISCRETE gates quartile truncation levels with the occlusion limits.
    truncation_mode: TruncationMode = TruncationMode.CONTINUOUS

    def __post_init__(self):
        object.__setattr__(self, "mode", DifficultyMode(self.mode))
        object.__setattr__(self, "truncation_mode", TruncationMode(self.truncation_mode))

        def nondecreasing(seq):
            return all(a <= b for a, b in zip(seq, seq[1:]))

        if not (nondecreasing(self.max_depths) and nondecreasing(self.max_occlusion)
                and nondecreasing(self.max_truncation)
                and all(a >= b for a, b in zip(self.min_heights, self.min_heights[1:]))):
            raise ValueError("difficulty thresholds must loosen from Easy to Hard")

    def passes_visibility(self, label: ObjectLabel, level: Difficulty) -> bool:
        if label.occlusion > self.max_occlusion[level]:
            return False
        if self.truncation_mode == TruncationMode.DISCRETE:
            return truncation_level(label.truncation) <= self.max_occlusion[level]
        return label.truncation <= self.max_truncation[level]

    def passes_extent(self, label: ObjectLabel, level: Difficulty) -> bool:
        if self.mode == DifficultyMode.OLD_PIXEL:
            return label.bbox_height >= self.min_heights[level]
        return label.depth <= self.max_depths[level]


def assign_difficulty(label: ObjectLabel, spec: DifficultySpec = DifficultySpec()) -> frozenset:
    """Difficulty levels the label belongs to; Easy implies Moderate implies Hard."""
    levels = set()
    for level in Difficulty:
        if spec.passes_visibility(label, level) and spec.passes_extent(label, level):
            levels.update(l for l in Difficulty if l >= level)
    return frozenset(levels)


@dataclass(frozen=True)
class DepthRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ValueError(f"invalid depth range [{self.lo}, {self.hi})")

    @property
    def name(self) -> str:
        return f"{self.lo:g}-{self.hi:g}m"

    def contains(self, depth: float) -> bool:
        return self.lo <= depth < self.hi


DEPTH_RANGES = (DepthRange(0, 30), DepthRange(30, 50), DepthRange(50, 70))


def in_depth_range(label: ObjectLabel, rng: DepthRange, max_occlusion: int = 2,
                   max_truncation: float = 0.50) -> bool:
    return (rng.contains(label.depth) and label.occlusion <= max_occlusion
            and label.truncation <= max_truncation)


@dataclass(frozen=True)
class Setting:
    """A row of the report: a difficulty level or a depth range."""

    difficulty: Difficulty | None = None
    depth_range: DepthRange | None = None

    def __post_init__(self):
        if (self.difficulty is None) == (self.depth_range is None):
            raise ValueError("a setting is either a difficulty or a depth range")

    @property
    def name(self) -> str:
        return self.difficulty.label if self.difficulty is not None else self.depth_range.name

    def gt_in_scope(self, label: ObjectLabel, spec: DifficultySpec) -> bool:
        if self.difficulty is not None:
            return self.difficulty in assign_difficulty(label, spec)
        return in_depth_range(label, self.depth_range, spec.max_occlusion[Difficulty.HARD],
                              spec.max_truncation[Difficulty.HARD])

    def det_in_scope(self, det: ObjectLabel, spec: DifficultySpec) -> bool:
        """Geometric gate for detections; unmatched detections outside it are ignored."""
        if self.difficulty is not None:
            return spec.passes_extent(det, self.difficulty)
        return self.depth_range.contains(det.depth)


DEFAULT_SETTINGS = tuple(Setting(difficulty=d) for d in Difficulty) + tuple(
    Setting(depth_range=r) for r in DEPTH_RANGES)


class DetStatus(str, enum.Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"


class GtStatus(str, enum.Enum):
    MATCHED = "matched"
    MISSED = "missed"
    IGNORED = "ignored"


class GtRole(enum.IntEnum):
    NONE = 0      # another class entirely; cannot absorb detections
    CARE = 1      # counts towards recall
    IGNORE = 2    # may absorb a detection without it counting either way


@dataclass
class MatchResult:
    det_status: list[DetStatus]
    det_gt: list[int | None]
    gt_status: list[GtStatus]
    scores: list[float]

    @property
    def num_gt(self) -> int:
        return sum(s != GtStatus.IGNORED for s in self.gt_status)

    def counted(self) -> tuple[list[float], list[bool]]:
        """Scores and TP flags of detections that enter the PR curve."""
        keep = [i for i, s in enumerate(self.det_status) if s != DetStatus.IGNORED]
        return ([self.scores[i] for i in keep],
                [self.det_status[i] == DetStatus.TP for i in keep])


def match_from_ious(ious: np.ndarray, scores: Sequence[float], gt_roles: Sequence[GtRole],
                    threshold: float, det_care: Sequence[bool] | None = None) -> MatchResult:
    """Greedy matching on a precomputed (n_det, n_gt) IoU matrix.

    Detections go in descending score (ties: input order).  Each takes the
    unmatched CARE ground truth of highest IoU (ties: lowest index) when that
    IoU reaches ``threshold``.  Pairs that do not overlap never match, so a
    threshold of 0 still needs some overlap.  Otherwise it is ignored if it
    reaches the threshold against an IGNORE ground truth or falls outside its
    own gate, and is a false positive if not.
    """
    n_det, n_gt = len(scores), len(gt_roles)
    ious = np.asarray(ious, dtype=np.float64).reshape(n_det, n_gt)
    roles = np.asarray([int(r) for r in gt_roles], dtype=np.int64)
    care = roles == GtRole.CARE
    ignorable = roles == GtRole.IGNORE
    available = care.copy()
    det_status: list[DetStatus] = [DetStatus.FP] * n_det
    det_gt: list[int | None] = [None] * n_det
    order = sorted(range(n_det), key=lambda i: -scores[i])
    for i in order:
        row = ious[i]
        if available.any():
            cand = np.where(available, row, -np.inf)
            j = int(np.argmax(cand))
            if cand[j] >= threshold and cand[j] > 0.0:
                det_status[i] = DetStatus.TP
                det_gt[i] = j
                available[j] = False
                continue
        hit = row[ignorable].max() if ignorable.any() else 0.0
        if hit >= threshold and hit > 0.0:
            det_status[i] = DetStatus.IGNORED
        elif det_care is not None and not det_care[i]:
            det_status[i] = DetStatus.IGNORED
    gt_status = []
    for j in range(n_gt):
        if not care[j]:
            gt_status.append(GtStatus.IGNORED)
        else:
            gt_status.append(GtStatus.MISSED if available[j] else GtStatus.MATCHED)
    return MatchResult(det_status, det_gt, gt_status, [float(s) for s in scores])


def _overlap_over_det_area(det: ObjectLabel, region: ObjectLabel) -> float:
    ax1, ay1, ax2, ay2 = det.bbox2d
    bx1, by1, bx2, by2 = region.bbox2d
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    area = (ax2 - ax1) * (ay2 - ay1)
    return iw * ih / area if area > 0 else 0.0


def _has_box(label: ObjectLabel) -> bool:
    return label.h > 0 and label.w > 0 and label.l > 0


def iou_matrix(dets: Sequence[ObjectLabel], gts: Sequence[ObjectLabel],
               iou_fn: Callable) -> np.ndarray:
    """Pairwise IoU.  GT regions without a 3D box (DontCare) use 2D overlap over
    the detection's 2D area instead, which is how KITTI tests DontCare regions."""
    out = np.zeros((len(dets), len(gts)))
    det_boxes = [d.box for d in dets]
    for j, g in enumerate(gts):
        if _has_box(g):
            gb = g.box
            for i, db in enumerate(det_boxes):
                out[i, j] = iou_fn(db, gb)
        else:
            for i, d in enumerate(dets):
                out[i, j] = _overlap_over_det_area(d, g)
    return out


def gt_roles_for(gts: Sequence[ObjectLabel], category: str, in_scope: Sequence[bool],
                 ignore_categories: Iterable[str], strict: bool = False) -> list[GtRole]:
    ignore_categories = set(ignore_categories)
    roles = []
    for g, ok in zip(gts, in_scope):
        if g.category == category:
            roles.append(GtRole.CARE if ok else (GtRole.NONE if strict else GtRole.IGNORE))
        elif g.category in ignore_categories:
            roles.append(GtRole.IGNORE)
        else:
            roles.append(GtRole.NONE)
    return roles


def match_detections(gts: Sequence[ObjectLabel], dets: Sequence[ObjectLabel],
                     iou_fn: Callable = iou_3d, threshold: float = 0.7,
                     ignore_categories: Iterable[str] = (DONT_CARE,), category: str = "Car",
                     gt_in_scope: Sequence[bool] | None = None,
                     det_in_scope: Sequence[bool] | None = None) -> MatchResult:
    """Match one frame's detections of ``category`` against its ground truth.

    Ground truth of other categories (for cars: trucks) never absorbs a
    detection.  Detections of other categories are reported as ignored.
    """
    if gt_in_scope is None:
        gt_in_scope = [True] * len(gts)
    relevant = [i for i, d in enumerate(dets) if d.category == category]
    sub = [dets[i] for i in relevant]
    ious = iou_matrix(sub, gts, iou_fn)
    roles = gt_roles_for(gts, category, gt_in_scope, ignore_categories)
    care = None if det_in_scope is None else [det_in_scope[i] for i in relevant]
    res = match_from_ious(ious, [d.score if d.score is not None else 0.0 for d in sub], roles,
                          threshold, care)
    status = [DetStatus.IGNORED] * len(dets)
    det_gt: list[int | None] = [None] * len(dets)
    scores = [d.score if d.score is not None else 0.0 for d in dets]
    for k, i in enumerate(relevant):
        status[i] = res.det_status[k]
        det_gt[i] = res.det_gt[k]
    return MatchResult(status, det_gt, res.gt_status, scores)


INTERPOLATION_POINTS = (40, 11)


def _recall_levels(points: int) -> list[tuple[int, int]]:
    """Recall sample points as exact fractions (numerator, denominator)."""
    if points == 40:
        return [(k, 40) for k in range(1, 41)]
    if points == 11:
        return [(k, 10) for k in range(0, 11)]
    raise ValueError(f"interpolation must be one of {INTERPOLATION_POINTS}, got {points}")


@dataclass
class APResult:
    ap: float
    pr: list[tuple[float, float]]


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int,
                      points: int = 40) -> APResult:
    """Interpolated AP over ``points`` recall samples.

    Precision at recall r is the best precision achieved at any recall >= r.
    With no ground truth the AP is 1 when there are no detections and 0
    otherwise.
    """
    levels = _recall_levels(points)
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_tp, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        ap = 1.0 if len(scores) == 0 else 0.0
        return APResult(ap, [(n / d, ap) for n, d in levels])
    if len(scores) == 0:
        return APResult(0.0, [(n / d, 0.0) for n, d in levels])
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order]).astype(np.int64)
    fp = np.cumsum(~flags[order]).astype(np.int64)
    precision = tp / (tp + fp)
    best_after = np.maximum.accumulate(precision[::-1])[::-1]
    pr = []
    for num, den in levels:
        # first index whose recall tp/num_gt reaches num/den, compared exactly
        idx = int(np.searchsorted(tp * den, num * num_gt, side="left"))
        pr.append((num / den, float(best_after[idx]) if idx < len(tp) else 0.0))
    ap = math.fsum(p for _, p in pr) / len(levels)
    return APResult(min(1.0, max(0.0, ap)), pr)


def average_precision_from_matches(matches: Iterable[MatchResult], points: int = 40) -> APResult:
    scores: list[float] = []
    flags: list[bool] = []
    num_gt = 0
    for m in matches:
        s, f = m.counted()
        scores += s
        flags += f
        num_gt += m.num_gt
    return average_precision(scores, flags, num_gt, points)


class FrameAlignmentError(ValueError):
    def __init__(self, missing_dets: Sequence[str], missing_gts: Sequence[str]):
        self.missing_dets = list(missing_dets)
        self.missing_gts = list(missing_gts)
        super().__init__(
            f"frames without detections: {self.missing_dets}; "
            f"detection frames without ground truth: {self.missing_gts}")


TASKS: dict[str, Callable] = {"bev": iou_bev, "3d": iou_3d}


@dataclass(frozen=True)
class EvalSettings:
    category: str = "Car"
    iou_threshold: float = 0.7
    interpolation: int = 40
    tasks: tuple[str, ...] = ("bev", "3d")
    settings: tuple[Setting, ...] = DEFAULT_SETTINGS
    ignore_categories: tuple[str, ...] = (DONT_CARE,)
    # strict: out-of-scope cars cannot absorb detections and detections are not gated
    strict: bool = False
    workers: int = 1


@dataclass
class APEntry:
    setting: str
    task: str
    iou_threshold: float
    ap: float
    pr: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {"setting": self.setting, "task": self.task, "iou_threshold": self.iou_threshold,
                "ap": self.ap, "pr": [[r, p] for r, p in self.pr]}


@dataclass
class EvalReport:
    entries: list[APEntry]
    metadata: dict = field(default_factory=dict)

    def ap(self, setting: str, task: str = "3d", iou_threshold: float | None = None) -> float:
        for e in self.entries:
            if e.setting == setting and e.task == task and (
                    iou_threshold is None or e.iou_threshold == iou_threshold):
                return e.ap
        raise KeyError((setting, task, iou_threshold))

    def table(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for e in self.entries:
            out.setdefault(e.setting, {})[e.task] = e.ap
        return out

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "results": [e.to_dict() for e in self.entries]}


@dataclass
class _PreparedFrame:
    gts: list[ObjectLabel]
    dets: list[ObjectLabel]
    scores: list[float]
    ious: dict[str, np.ndarray]


def _prepare_frame(args) -> _PreparedFrame:
    gts, dets, category, tasks = args
    dets = [d for d in dets if d.category == category]
    ious = {t: iou_matrix(dets, gts, TASKS[t]) for t in tasks}
    return _PreparedFrame(list(gts), dets, [d.score if d.score is not None else 0.0 for d in dets],
                          ious)


def _aligned(gt_frames: Mapping[str, Sequence[ObjectLabel]],
             det_frames: Mapping[str, Sequence[ObjectLabel]]) -> list[str]:
    missing_dets = sorted(set(gt_frames) - set(det_frames))
    missing_gts = sorted(set(det_frames) - set(gt_frames))
    if missing_dets or missing_gts:
        raise FrameAlignmentError(missing_dets, missing_gts)
    return sorted(gt_frames)


def prepare_frames(gt_frames, det_frames, settings: EvalSettings) -> list[_PreparedFrame]:
    ids = _aligned(gt_frames, det_frames)
    jobs = [(list(gt_frames[f]), list(det_frames[f]), settings.category, settings.tasks)
            for f in ids]
    if settings.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(settings.workers) as pool:
            return list(pool.map(_prepare_frame, jobs, chunksize=max(1, len(jobs) // (4 * settings.workers))))
    return [_prepare_frame(j) for j in jobs]


def _evaluate_prepared(frames: Sequence[_PreparedFrame], spec: DifficultySpec,
                       settings: EvalSettings, threshold: float) -> list[APEntry]:
    entries = []
    for setting in settings.settings:
        scoped = []
        for fr in frames:
            in_scope = [setting.gt_in_scope(g, spec) if g.category == settings.category else False
                        for g in fr.gts]
            roles = gt_roles_for(fr.gts, settings.category, in_scope, settings.ignore_categories,
                                 settings.strict)
            det_care = None if settings.strict else [setting.det_in_scope(d, spec) for d in fr.dets]
            scoped.append((roles, det_care))
        for task in settings.tasks:
            matches = [match_from_ious(fr.ious[task], fr.scores, roles, threshold, det_care)
                       for fr, (roles, det_care) in zip(frames, scoped)]
            res = average_precision_from_matches(matches, settings.interpolation)
            entries.append(APEntry(setting.name, task, threshold, res.ap, res.pr))
    return entries


def evaluate(gt_frames: Mapping[str, Sequence[ObjectLabel]],
             det_frames: Mapping[str, Sequence[ObjectLabel]],
             spec: DifficultySpec = DifficultySpec(),
             settings: EvalSettings = EvalSettings()) -> EvalReport:
    """AP for every (setting, task) cell at ``settings.iou_threshold``."""
    frames = prepare_frames(gt_frames, det_frames, settings)
    entries = _evaluate_prepared(frames, spec, settings, settings.iou_threshold)
    return EvalReport(entries, _metadata(spec, settings, len(frames)))


def _metadata(spec: DifficultySpec, settings: EvalSettings, n_frames: int) -> dict:
    return {"category": settings.category, "difficulty_mode": spec.mode.value,
            "truncation_mode": spec.truncation_mode.value,
            "interpolation_points": settings.interpolation, "strict": settings.strict,
            "num_frames": n_frames}


def default_sweep_thresholds(step: float = 0.05) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def iou_threshold_sweep(gt_frames, det_frames, thresholds: Sequence[float] | None = None,
                        spec: DifficultySpec = DifficultySpec(),
                        settings: EvalSettings = EvalSettings()) -> EvalReport:
    """Evaluate every cell at each threshold (IoU matrices are computed once)."""
    thresholds = list(default_sweep_thresholds() if thresholds is None else thresholds)
    if not thresholds:
        raise ValueError("threshold list must not be empty")
    frames = prepare_frames(gt_frames, det_frames, settings)
    entries = []
    for t in sorted(thresholds):
        entries += _evaluate_prepared(frames, spec, settings, float(t))
    meta = _metadata(spec, settings, len(frames))
    meta["thresholds"] = sorted(float(t) for t in thresholds)
    return EvalReport(entries, meta)


def sweep_curve(report: EvalReport, setting: str, task: str = "3d") -> list[tuple[float, float]]:
    return sorted((e.iou_threshold, e.ap) for e in report.entries
                  if e.setting == setting and e.task == task)
