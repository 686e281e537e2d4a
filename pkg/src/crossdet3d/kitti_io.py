"""KITTI label / calibration / velodyne I/O and the intermediate frame format.

Label files have 15 whitespace-separated fields per object, 16 when a
detection score is present::

    type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]

Canonical output formatting (what :func:`write_label_file` emits):

* truncation and the 2D box: fixed two decimals;
* occlusion: integer;
* alpha, dimensions, location, rotation_y and score: six significant digits,
  positional notation, trailing zeros trimmed.

Parsing canonical text and writing it back reproduces it byte for byte.

Velodyne scans are little-endian float32 quadruplets ``(x, y, z, intensity)``.
In memory a :class:`PointCloud` holds float64, so one read/write pass
canonicalises to float32 and later passes are byte-identical.

The intermediate conversion format is JSON Lines, one frame per line::

    {"frame_id": "000123",
     "image_size": [1920, 1280],
     "calib": {"P2": [12 floats], "R0_rect": [9], "Tr_velo_to_cam": [12], ...},
     "velodyne": "clouds/000123.bin",          # optional, relative to the .jsonl
     "objects": [{"category": "VEHICLE",
                  "box": {"x": .., "y": .., "z": .., "h": .., "w": .., "l": .., "yaw": ..},
                  "track_id": "abc"}]}          # track_id optional

Boxes are in the rectified camera frame with the bottom-centre anchor.  Calib
keys absent from ``calib`` default to KITTI-style identities (P0..P3 default
to P2).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, CameraProjection

DONT_CARE = "DontCare"
CALIB_KEYS = ("P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam")
DEFAULT_IMAGE_SIZE = (1242, 375)


class KittiFormatError(ValueError):
    """Malformed KITTI-style input; carries the offending location."""

    def __init__(self, message: str, line: int | None = None, field_index: int | None = None):
        self.line = line
        self.field_index = field_index
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_index is not None:
            where.append(f"field {field_index}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def fmt_fixed(v: float, decimals: int = 2) -> str:
    return f"{v:.{decimals}f}"


def fmt_sig(v: float, digits: int = 6) -> str:
    return np.format_float_positional(float(v), precision=digits, unique=False,
                                      fractional=False, trim="-")


@dataclass(frozen=True)
class ObjectLabel:
    """One KITTI label row.  ``score`` is set only for detections."""

    category: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    rotation_y: float
    score: float | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox2d
        object.__setattr__(self, "bbox2d", (float(x1), float(y1), float(x2), float(y2)))
        if x1 > x2 or y1 > y2:
            raise ValueError(f"2D box must satisfy x1<=x2, y1<=y2, got {self.bbox2d}")
        # KITTI writes -1 for truncation/occlusion of DontCare regions.
        sentinel = self.category == DONT_CARE
        if not (0.0 <= self.truncation <= 1.0 or (sentinel and self.truncation == -1.0)):
            raise ValueError(f"truncation must be in [0, 1], got {self.truncation}")
        if self.occlusion not in (0, 1, 2, 3) and not (sentinel and self.occlusion == -1):
            raise ValueError(f"occlusion must be one of 0..3, got {self.occlusion}")
        if self.category != DONT_CARE and not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(f"{self.category} dimensions must be positive, got "
                             f"h,w,l=({self.h}, {self.w}, {self.l})")

    @property
    def box(self) -> Box3D:
        return Box3D((self.x, self.y, self.z), self.h, self.w, self.l, self.rotation_y)

    @property
    def depth(self) -> float:
        return self.z

    @property
    def bbox_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def with_box(self, box: Box3D) -> "ObjectLabel":
        x, y, z = box.location
        return replace(self, h=box.h, w=box.w, l=box.l, x=x, y=y, z=z, rotation_y=box.yaw)

    @classmethod
    def from_box(cls, category: str, box: Box3D, *, truncation: float = 0.0, occlusion: int = 0,
                 alpha: float | None = None, bbox2d=(0.0, 0.0, 0.0, 0.0),
                 score: float | None = None) -> "ObjectLabel":
        x, y, z = box.location
        if alpha is None:
            alpha = observation_angle(box)
        return cls(category, truncation, occlusion, alpha, tuple(bbox2d), box.h, box.w, box.l,
                   x, y, z, box.yaw, score)


def observation_angle(box: Box3D) -> float:
    """KITTI ``alpha``: yaw minus the viewing ray azimuth, wrapped to [-pi, pi]."""
    x, _, z = box.location
    a = box.yaw - math.atan2(x, z)
    return math.remainder(a, 2.0 * math.pi)


_LABEL_NUMERIC = 14


def parse_label_line(line: str, lineno: int | None = None) -> ObjectLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise KittiFormatError(f"expected 15 or 16 fields, got {len(parts)}", lineno)
    values: list[float] = []
    for idx, tok in enumerate(parts[1:], start=1):
        try:
            val = float(tok)
        except ValueError:
            raise KittiFormatError(f"not a number: {tok!r}", lineno, idx) from None
        if not math.isfinite(val):
            raise KittiFormatError(f"non-finite value {tok!r}", lineno, idx)
        values.append(val)
    occ = values[1]
    allowed = (-1, 0, 1, 2, 3) if parts[0] == DONT_CARE else (0, 1, 2, 3)
    if occ != int(occ) or int(occ) not in allowed:
        raise KittiFormatError(f"occlusion must be an integer in 0..3, got {parts[2]!r}", lineno, 2)
    try:
        return ObjectLabel(
            category=parts[0], truncation=values[0], occlusion=int(occ), alpha=values[2],
            bbox2d=(values[3], values[4], values[5], values[6]),
            h=values[7], w=values[8], l=values[9], x=values[10], y=values[11], z=values[12],
            rotation_y=values[13], score=values[14] if len(values) > _LABEL_NUMERIC else None)
    except ValueError as exc:
        raise KittiFormatError(str(exc), lineno) from None


def parse_label_file(text: str) -> list[ObjectLabel]:
    return [parse_label_line(line, lineno)
            for lineno, line in enumerate(text.splitlines(), start=1) if line.strip()]


def format_label(label: ObjectLabel) -> str:
    fields = [label.category, fmt_fixed(label.truncation), str(label.occlusion), fmt_sig(label.alpha)]
    fields += [fmt_fixed(v) for v in label.bbox2d]
    fields += [fmt_sig(v) for v in (label.h, label.w, label.l, label.x, label.y, label.z,
                                    label.rotation_y)]
    if label.score is not None:
        fields.append(fmt_sig(label.score))
    return " ".join(fields)


def write_label_file(labels: Iterable[ObjectLabel]) -> str:
    return "".join(format_label(lab) + "\n" for lab in labels)


class Frame(str, enum.Enum):
    LIDAR = "lidar"
    CAMERA = "camera"


@dataclass(eq=False)
class PointCloud:
    """(N, 4) float64 array of x, y, z, intensity."""

    points: np.ndarray
    frame: Frame = Frame.LIDAR

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 4))
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        if len(pts) and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise ValueError("point intensity must lie in [0, 1]")
        self.points = pts
        self.frame = Frame(self.frame)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def equals(self, other: "PointCloud") -> bool:
        return self.frame == other.frame and np.array_equal(self.points, other.points)

    @classmethod
    def empty(cls, frame: Frame = Frame.LIDAR) -> "PointCloud":
        return cls(np.zeros((0, 4)), frame)


def read_point_cloud(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise KittiFormatError(f"velodyne payload of {len(data)} bytes is not a multiple of 16")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    try:
        return PointCloud(arr, Frame.LIDAR)
    except ValueError as exc:
        raise KittiFormatError(str(exc)) from None


def write_point_cloud(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


@dataclass(frozen=True, eq=False)
class Calibration:
    P0: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    P3: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, shape in (("P0", (3, 4)), ("P1", (3, 4)), ("P2", (3, 4)), ("P3", (3, 4)),
                           ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))):
            arr = np.asarray(getattr(self, key), dtype=np.float64).reshape(shape)
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        for name, rot in (("R0_rect", self.R0_rect), ("Tr_velo_to_cam", self.Tr_velo_to_cam[:, :3])):
            if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-4:
                raise ValueError(f"{name} rotation block is not orthonormal")

    @classmethod
    def from_projection(cls, p2, r0=None, tr=None) -> "Calibration":
        p2 = np.asarray(p2, dtype=np.float64).reshape(3, 4)
        r0 = np.eye(3) if r0 is None else r0
        tr = np.hstack([np.eye(3), np.zeros((3, 1))]) if tr is None else tr
        return cls(p2, p2, p2, p2, r0, tr)

    def camera(self, width: int, height: int, index: int = 2) -> CameraProjection:
        return CameraProjection(getattr(self, f"P{index}"), width, height)

    def lidar_to_cam_matrix(self) -> np.ndarray:
        """4x4 homogeneous transform applying ``R0_rect @ Tr_velo_to_cam``."""
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        return r0 @ tr

    def equals(self, other: "Calibration") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in CALIB_KEYS) \
            and self.extras == other.extras


def parse_calibration(text: str) -> Calibration:
    values: dict[str, list[float]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise KittiFormatError("expected 'key: values'", lineno)
        key, rest = line.split(":", 1)
        try:
            values[key.strip()] = [float(t) for t in rest.split()]
        except ValueError:
            raise KittiFormatError(f"non-numeric value for {key.strip()!r}", lineno) from None
    # Some releases name these differently.
    aliases = {"R_rect": "R0_rect", "Tr_velo_cam": "Tr_velo_to_cam"}
    for old, new in aliases.items():
        if old in values and new not in values:
            values[new] = values.pop(old)
    sizes = {"P0": 12, "P1": 12, "P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
    for key, size in sizes.items():
        if key not in values:
            raise KittiFormatError(f"missing calibration key {key!r}")
        if len(values[key]) != size:
            raise KittiFormatError(f"{key!r} needs {size} values, got {len(values[key])}")
    extras = {k: v for k, v in values.items() if k not in sizes}
    return Calibration(*(np.array(values[k]) for k in CALIB_KEYS), extras=extras)


def write_calibration(calib: Calibration) -> str:
    lines = []
    for key in CALIB_KEYS:
        lines.append(f"{key}: " + " ".join(f"{v:.12e}" for v in getattr(calib, key).ravel()))
    for key, vals in calib.extras.items():
        lines.append(f"{key}: " + " ".join(f"{v:.12e}" for v in vals))
    return "\n".join(lines) + "\n"


def transform_points(xyz: np.ndarray, matrix4: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return xyz @ matrix4[:3, :3].T + matrix4[:3, 3]


def lidar_to_camera(cloud: PointCloud, calib: Calibration) -> PointCloud:
    if cloud.frame != Frame.LIDAR:
        raise ValueError(f"expected a lidar-frame cloud, got {cloud.frame.value}")
    pts = cloud.points.copy()
    pts[:, :3] = transform_points(cloud.xyz, calib.lidar_to_cam_matrix())
    return PointCloud(pts, Frame.CAMERA)


def camera_to_lidar(cloud: PointCloud, calib: Calibration) -> PointCloud:
    if cloud.frame != Frame.CAMERA:
        raise ValueError(f"expected a camera-frame cloud, got {cloud.frame.value}")
    pts = cloud.points.copy()
    pts[:, :3] = transform_points(cloud.xyz, np.linalg.inv(calib.lidar_to_cam_matrix()))
    return PointCloud(pts, Frame.LIDAR)


@dataclass(eq=False)
class FrameBundle:
    frame_id: str
    cloud: PointCloud
    calib: Calibration
    labels: list[ObjectLabel]
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE

    @property
    def camera(self) -> CameraProjection:
        return self.calib.camera(*self.image_size)

    def camera_cloud(self) -> PointCloud:
        if self.cloud.frame == Frame.CAMERA:
            return self.cloud
        return lidar_to_camera(self.cloud, self.calib)


# KITTI directory layout -----------------------------------------------------

def label_dir(root: Path) -> Path:
    """``root/label_2`` if present, otherwise ``root`` itself."""
    root = Path(root)
    return root / "label_2" if (root / "label_2").is_dir() else root


def list_frame_ids(directory: Path, suffix: str = ".txt") -> list[str]:
    return sorted(p.stem for p in Path(directory).glob(f"*{suffix}"))


def read_label_dir(root: Path) -> dict[str, list[ObjectLabel]]:
    d = label_dir(root)
    return {fid: parse_label_file((d / f"{fid}.txt").read_text()) for fid in list_frame_ids(d)}


def write_label_dir(root: Path, labels: dict[str, Sequence[ObjectLabel]]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for fid in sorted(labels):
        (root / f"{fid}.txt").write_text(write_label_file(labels[fid]))


def read_kitti_frame(root: Path, frame_id: str,
                     image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE) -> FrameBundle:
    root = Path(root)
    calib = parse_calibration((root / "calib" / f"{frame_id}.txt").read_text())
    labels = parse_label_file((root / "label_2" / f"{frame_id}.txt").read_text())
    velo = root / "velodyne" / f"{frame_id}.bin"
    cloud = read_point_cloud(velo.read_bytes()) if velo.exists() else PointCloud.empty()
    return FrameBundle(frame_id, cloud, calib, labels, image_size)


def write_kitti_frame(root: Path, frame: FrameBundle) -> None:
    root = Path(root)
    for sub in ("label_2", "calib", "velodyne"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cloud = frame.cloud if frame.cloud.frame == Frame.LIDAR else camera_to_lidar(frame.cloud, frame.calib)
    (root / "label_2" / f"{frame.frame_id}.txt").write_text(write_label_file(frame.labels))
    (root / "calib" / f"{frame.frame_id}.txt").write_text(write_calibration(frame.calib))
    (root / "velodyne" / f"{frame.frame_id}.bin").write_bytes(write_point_cloud(cloud))


# Intermediate frame format --------------------------------------------------

@dataclass(frozen=True)
class RawObject:
    source_category: str
    box3d: Box3D
    track_id: str | None = None


@dataclass(eq=False)
class RawFrame:
    frame_id: str
    image_size: tuple[int, int]
    calib: Calibration
    objects: list[RawObject]
    cloud: PointCloud = field(default_factory=PointCloud.empty)


def _calib_from_json(d: dict) -> Calibration:
    if "P2" not in d:
        raise KittiFormatError("missing calibration key 'P2'")
    p2 = d["P2"]
    mats = {k: np.asarray(d.get(k, p2), dtype=np.float64) for k in ("P0", "P1", "P2", "P3")}
    r0 = np.asarray(d.get("R0_rect", np.eye(3).ravel()), dtype=np.float64)
    tr = np.asarray(d.get("Tr_velo_to_cam", np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()),
                    dtype=np.float64)
    return Calibration(mats["P0"], mats["P1"], mats["P2"], mats["P3"], r0, tr)


def raw_frame_from_dict(d: dict, base_dir: Path | None = None) -> RawFrame:
    try:
        objects = []
        for obj in d.get("objects", []):
            b = obj["box"]
            box = Box3D((b["x"], b["y"], b["z"]), b["h"], b["w"], b["l"], b.get("yaw", 0.0))
            tid = obj.get("track_id")
            objects.append(RawObject(str(obj["category"]), box, None if tid is None else str(tid)))
        width, height = d["image_size"]
        cloud = PointCloud.empty()
        if d.get("velodyne"):
            path = Path(d["velodyne"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            cloud = read_point_cloud(path.read_bytes())
        return RawFrame(str(d["frame_id"]), (int(width), int(height)), _calib_from_json(d["calib"]),
                        objects, cloud)
    except KeyError as exc:
        raise KittiFormatError(f"missing key {exc.args[0]!r}") from None


def raw_frame_to_dict(frame: RawFrame, velodyne: str | None = None) -> dict:
    d = {
        "frame_id": frame.frame_id,
        "image_size": list(frame.image_size),
        "calib": {k: getattr(frame.calib, k).ravel().tolist() for k in CALIB_KEYS},
        "objects": [
            {"category": o.source_category,
             "box": {"x": o.box3d.location.x, "y": o.box3d.location.y, "z": o.box3d.location.z,
                     "h": o.box3d.h, "w": o.box3d.w, "l": o.box3d.l, "yaw": o.box3d.yaw},
             **({"track_id": o.track_id} if o.track_id is not None else {})}
            for o in frame.objects],
    }
    if velodyne is not None:
        d["velodyne"] = velodyne
    return d


def read_raw_frames(path: Path) -> Iterable[tuple[int, RawFrame | Exception]]:
    """Yield ``(line number, frame or parse error)`` for every non-empty line."""
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, raw_frame_from_dict(json.loads(line), path.parent)
            except (ValueError, KittiFormatError, OSError, TypeError) as exc:
                yield lineno, exc
