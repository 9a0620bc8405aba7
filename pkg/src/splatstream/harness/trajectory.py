"""Camera paths as plain text, one pose per line: frame,px,py,pz,qw,qx,qy,qz,t."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import Camera
from ..exceptions import ContractViolation, FormatError

COLUMNS = ("frame", "px", "py", "pz", "qw", "qx", "qy", "qz", "t")
QUAT_TOL = 1e-5


@dataclass(frozen=True)
class Pose:
    frame: int
    position: np.ndarray
    quaternion: np.ndarray
    t: float

    def camera(self, **intrinsics) -> Camera:
        return Camera.from_pose(self.position, self.quaternion, **intrinsics)


class Trajectory:
    """Ordered poses with strictly increasing frame ids and unit quaternions."""

    def __init__(self, poses):
        self.poses = list(poses)
        frames = [p.frame for p in self.poses]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ContractViolation("trajectory frame ids must be strictly increasing")
        for p in self.poses:
            if abs(float(np.linalg.norm(p.quaternion)) - 1.0) > QUAT_TOL:
                raise ContractViolation(f"frame {p.frame}: quaternion is not unit length")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for p in self.poses:
            w.writerow([p.frame, *(repr(float(v)) for v in p.position),
                        *(repr(float(v)) for v in p.quaternion), repr(float(p.t))])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "Trajectory":
        poses = []
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
            if not row or row[0].lstrip().startswith("#") or row[0].strip() == "frame":
                continue
            if len(row) != len(COLUMNS):
                raise FormatError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
            try:
                v = [float(x) for x in row[1:]]
                frame = int(row[0])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
            poses.append(Pose(frame, np.array(v[0:3]), np.array(v[3:7]), v[7]))
        return cls(poses)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls.from_text(Path(path).read_text())


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def orbit(center, radius: float, height: float, frames: int, deg_per_frame: float = 0.25,
          fps: float = 90.0, start_deg: float = 0.0, target_height: float = 0.0) -> Trajectory:
    """Circle around ``center`` looking at it; poses are stored at f32 precision.

    Values are what a POSE message would carry, so the cloud sees exactly
    the pose the file describes.
    """
    c = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(frames):
        a = np.radians(start_deg + i * deg_per_frame)
        eye = c + np.array([radius * np.cos(a), radius * np.sin(a), height])
        target = c + np.array([0.0, 0.0, target_height])
        cam = Camera.look_at(eye, target, width=4, height=4, focal=1.0, principal=(2.0, 2.0))
        pos, quat = cam.pose()
        poses.append(Pose(i, _f32(pos), _f32(quat), i / fps))
    return Trajectory(poses)


def static(position, quaternion, frames: int, fps: float = 90.0) -> Trajectory:
    return Trajectory(Pose(i, _f32(position), _f32(quaternion), i / fps) for i in range(frames))
