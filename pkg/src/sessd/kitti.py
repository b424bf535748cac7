"""KITTI object-benchmark file formats: velodyne scans, label_2 lines and calib files.

Camera-frame labels are converted into the LiDAR frame used everywhere else:
the bottom-center location is lifted by half the height (camera y points
down), mapped through the inverse of ``R0_rect @ Tr_velo_to_cam``, and the
heading vector ``(cos ry, 0, -sin ry)`` is mapped the same way to get the BEV
yaw. With the usual calibration this gives ``yaw = -ry - pi/2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detections import Detections, sigmoid
from .geom import Box3D, normalize_angle
from .scene import ObjectLabel, Scene


class MalformedBin(ValueError):
    pass


class MalformedLabel(ValueError):
    pass


class MissingCalibKey(KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0])


@dataclass(frozen=True)
class Calib:
    r0_rect: np.ndarray  # (3, 3)
    tr_velo_to_cam: np.ndarray  # (3, 4)

    @property
    def velo_to_rect(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :4] = self.tr_velo_to_cam
        r = np.eye(4)
        r[:3, :3] = self.r0_rect
        return r @ m

    @classmethod
    def canonical(cls) -> "Calib":
        """Axis permutation only: x_cam = -y_velo, y_cam = -z_velo, z_cam = x_velo."""
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        return cls(np.eye(3), tr)


# -- point clouds ---------------------------------------------------------------------

def read_velodyne(path) -> np.ndarray:
    p = Path(path)
    data = p.read_bytes()
    if len(data) % 16:
        raise MalformedBin(f"{p}: size {len(data)} is not a multiple of 16 bytes")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_velodyne(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = np.zeros((0, 4))
    if pts.shape[1] == 3:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    Path(path).write_bytes(pts[:, :4].astype("<f4").tobytes())


# -- calibration ------------------------------------------------------------------------

def read_calib(path) -> Calib:
    p = Path(path)
    vals = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        if ":" not in raw:
            continue
        key, rest = raw.split(":", 1)
        try:
            vals[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise MalformedLabel(f"{p}:{lineno}: non-numeric calibration entry {key.strip()!r}") from None
    r0 = vals.get("R0_rect", vals.get("R_rect"))
    tr = vals.get("Tr_velo_to_cam", vals.get("Tr_velo_cam"))
    if r0 is None:
        raise MissingCalibKey(f"{p}: missing key R0_rect")
    if tr is None:
        raise MissingCalibKey(f"{p}: missing key Tr_velo_to_cam")
    if r0.size != 9 or tr.size != 12:
        raise MalformedLabel(f"{p}: R0_rect needs 9 values and Tr_velo_to_cam 12")
    return Calib(r0.reshape(3, 3), tr.reshape(3, 4))


def write_calib(path, calib: Calib) -> None:
    fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))  # noqa: E731
    Path(path).write_text(f"R0_rect: {fmt(calib.r0_rect)}\nTr_velo_to_cam: {fmt(calib.tr_velo_to_cam)}\n")


# -- boxes --------------------------------------------------------------------------

def camera_to_lidar(dims_hwl, loc, ry: float, calib: Calib) -> Box3D:
    h, w, l = (float(v) for v in dims_hwl)
    inv = np.linalg.inv(calib.velo_to_rect)
    center_cam = np.array([loc[0], loc[1] - 0.5 * h, loc[2], 1.0])
    c = inv @ center_cam
    heading = inv[:3, :3] @ np.array([math.cos(ry), 0.0, -math.sin(ry)])
    return Box3D(c[0], c[1], c[2], w, l, h, normalize_angle(math.atan2(heading[1], heading[0])))


def lidar_to_camera(box: Box3D, calib: Calib) -> tuple[tuple[float, float, float], tuple[float, float, float], float]:
    """Returns ((h, w, l), bottom-center location, rotation_y)."""
    m = calib.velo_to_rect
    c = m @ np.array([box.cx, box.cy, box.cz, 1.0])
    heading = m[:3, :3] @ np.array([math.cos(box.r), math.sin(box.r), 0.0])
    ry = normalize_angle(math.atan2(-heading[2], heading[0]))
    return (box.h, box.w, box.l), (c[0], c[1] + 0.5 * box.h, c[2]), ry


def parse_label_line(line: str, calib: Calib, where: str = "<label>"):
    """One KITTI label line -> (ObjectLabel, score or None); DontCare lines give None."""
    parts = line.split()
    if len(parts) not in (15, 16):
        raise MalformedLabel(f"{where}: expected 15 or 16 fields, got {len(parts)}")
    cls = parts[0]
    if cls == "DontCare":
        return None
    try:
        nums = [float(v) for v in parts[1:]]
    except ValueError:
        raise MalformedLabel(f"{where}: non-numeric field") from None
    trunc, occ = nums[0], int(nums[1])
    y1, y2 = nums[4], nums[6]
    dims, loc, ry = nums[7:10], nums[10:13], nums[13]
    score = nums[14] if len(nums) == 15 else None
    try:
        box = camera_to_lidar(dims, loc, ry, calib)
        label = ObjectLabel(cls, box, min(max(trunc, 0.0), 1.0), min(max(occ, 0), 3), y2 - y1)
    except ValueError as exc:
        raise MalformedLabel(f"{where}: {exc}") from None
    return label, score


def read_labels(path, calib: Calib) -> tuple[list[ObjectLabel], list[float | None]]:
    p = Path(path)
    labels, scores = [], []
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        if not raw.strip():
            continue
        parsed = parse_label_line(raw, calib, f"{p}:{lineno}")
        if parsed is None:
            continue
        labels.append(parsed[0])
        scores.append(parsed[1])
    return labels, scores


def format_label(label: ObjectLabel, calib: Calib, score: float | None = None) -> str:
    (h, w, l), loc, ry = lidar_to_camera(label.box, calib)
    alpha = normalize_angle(ry - math.atan2(loc[0], loc[2]))
    fields = [label.cls, repr(float(label.truncation)), str(label.occlusion), repr(alpha),
              "0.0", "0.0", "0.0", repr(float(label.bbox_height)),
              repr(h), repr(w), repr(l), repr(float(loc[0])), repr(float(loc[1])), repr(float(loc[2])), repr(ry)]
    if score is not None:
        fields.append(repr(float(score)))
    return " ".join(fields)


def write_labels(path, labels: list[ObjectLabel], calib: Calib, scores=None) -> None:
    lines = [format_label(lb, calib, None if scores is None else scores[i]) for i, lb in enumerate(labels)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_predictions(path, dets: Detections, calib: Calib, cls: str = "Car") -> None:
    labels = [ObjectLabel(cls, Box3D.from_array(b)) for b in dets.boxes]
    write_labels(path, labels, calib, list(sigmoid(dets.logits)))


def read_predictions(path, calib: Calib) -> Detections:
    labels, scores = read_labels(path, calib)
    if not labels:
        return Detections.empty()
    s = np.array([1.0 if v is None else v for v in scores], dtype=np.float64)
    s = np.clip(s, 1e-12, 1 - 1e-12)
    return Detections(np.stack([lb.box.to_array() for lb in labels]), np.log(s / (1 - s)))


# -- scenes -------------------------------------------------------------------------

def load_kitti_scene(bin_path, label_path, calib_path) -> Scene:
    calib = read_calib(calib_path)
    labels, _ = read_labels(label_path, calib)
    return Scene(read_velodyne(bin_path), labels)


def save_kitti_scene(root, scene_id: str, scene: Scene, calib: Calib | None = None) -> tuple[Path, Path, Path]:
    root = Path(root)
    calib = calib or Calib.canonical()
    paths = (root / "velodyne" / f"{scene_id}.bin", root / "label_2" / f"{scene_id}.txt",
             root / "calib" / f"{scene_id}.txt")
    for p in paths:
        p.parent.mkdir(parents=True, exist_ok=True)
    write_velodyne(paths[0], scene.points)
    write_labels(paths[1], scene.labels, calib)
    write_calib(paths[2], calib)
    return paths
