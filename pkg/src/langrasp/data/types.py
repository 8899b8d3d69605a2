"""Record types shared across dataset construction and loading.

3-D quantities live in the object frame unless stated otherwise; a CameraView
carries the rigid transform into the camera frame (z forward, x right, y down)
plus pinhole intrinsics mapping camera points to (column, row) pixels.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from langrasp.geometry import GraspRect

TARGET_LEVELS = ("object", "part")
INSTRUCTION_KINDS = ("explicit", "implicit")


@dataclass(frozen=True)
class Grasp6D:
    """A parallel-jaw grasp in the object frame.

    rotation columns are (closing axis, jaw axis, approach axis); width is the
    jaw opening in meters; score in [0, 1].
    """

    position: np.ndarray
    rotation: np.ndarray
    width: float
    score: float = 1.0

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=np.float64)
        rot = np.asarray(self.rotation, dtype=np.float64)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError("position must be a finite (3,) vector")
        if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
            raise ValueError("rotation must be a finite (3, 3) matrix")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal within 1e-6")
        if self.width <= 0.0:
            raise ValueError(f"width must be > 0, got {self.width}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        pos.setflags(write=False)
        rot.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)

    @property
    def closing_axis(self) -> np.ndarray:
        return self.rotation[:, 0]


@dataclass(frozen=True)
class PartAnnotation:
    """A named object part: representative surface points plus the grasps
    assigned to it by nearest-part assignment."""

    object_id: str
    part_name: str
    part_points: np.ndarray
    assigned_grasps: Tuple[Grasp6D, ...] = ()

    def __post_init__(self) -> None:
        if not self.part_name.strip():
            raise ValueError("part_name must be non-empty")
        pts = np.asarray(self.part_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(
                f"part {self.part_name!r}: part_points must be a non-empty (N, 3) array"
            )
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"part {self.part_name!r}: part_points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "part_points", pts)
        object.__setattr__(self, "assigned_grasps", tuple(self.assigned_grasps))


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with a rigid object-to-camera transform.

    intrinsics is the 3x3 matrix [[fx, 0, cx], [0, fy, cy], [0, 0, 1]];
    object_pose is 4x4, mapping object-frame points into the camera frame;
    image_size is (height, width) in pixels.
    """

    intrinsics: np.ndarray
    object_pose: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self) -> None:
        k = np.asarray(self.intrinsics, dtype=np.float64)
        pose = np.asarray(self.object_pose, dtype=np.float64)
        if k.shape != (3, 3) or not np.all(np.isfinite(k)):
            raise ValueError("intrinsics must be a finite 3x3 matrix")
        if k[0, 0] <= 0 or k[1, 1] <= 0 or abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics must be invertible with positive focal lengths")
        if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
            raise ValueError("object_pose must be a finite 4x4 matrix")
        if not np.allclose(pose[:3, :3] @ pose[:3, :3].T, np.eye(3), atol=1e-6):
            raise ValueError("object_pose rotation must be orthonormal within 1e-6")
        if not np.allclose(pose[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise ValueError("object_pose bottom row must be [0, 0, 0, 1]")
        h, w = int(self.image_size[0]), int(self.image_size[1])
        if h <= 0 or w <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        k.setflags(write=False)
        pose.setflags(write=False)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "object_pose", pose)
        object.__setattr__(self, "image_size", (h, w))

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) object-frame points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.object_pose[:3, :3].T + self.object_pose[:3, 3]


@dataclass
class InstructionSample:
    """One training/eval record: an instruction naming or implying one target.

    Explicit samples contain target_name inside the instruction
    (case-insensitive); implicit samples must not. gt_rects is never empty.
    """

    scene_id: str
    image_path: str
    instruction: str
    target_name: str
    target_level: str
    instruction_kind: str
    gt_rects: List[GraspRect]
    depth_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.target_level not in TARGET_LEVELS:
            raise ValueError(f"target_level must be one of {TARGET_LEVELS}, got {self.target_level!r}")
        if self.instruction_kind not in INSTRUCTION_KINDS:
            raise ValueError(
                f"instruction_kind must be one of {INSTRUCTION_KINDS}, got {self.instruction_kind!r}"
            )
        if not self.target_name.strip():
            raise ValueError("target_name must be non-empty")
        contains = self.target_name.casefold() in self.instruction.casefold()
        if self.instruction_kind == "explicit" and not contains:
            raise ValueError(
                f"explicit sample must contain its target name: {self.target_name!r} "
                f"not in {self.instruction!r}"
            )
        if self.instruction_kind == "implicit" and contains:
            raise ValueError(
                f"implicit sample must not contain its target name: {self.target_name!r} "
                f"in {self.instruction!r}"
            )
        if len(self.gt_rects) == 0:
            raise ValueError("gt_rects must be non-empty")


@dataclass
class GenericSample:
    """A plain instruction-following record (no grasp target, text loss only)."""

    scene_id: str
    image_path: str
    instruction: str
    response: str

    def __post_init__(self) -> None:
        if not self.instruction.strip() or not self.response.strip():
            raise ValueError("instruction and response must be non-empty")
