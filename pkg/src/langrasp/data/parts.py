"""Part assignment and 3-D to 2-D projection of parts and grasps.

Grasps are assigned to the part whose annotated surface points come closest
to the grasp center; ties go to the lowest part index. Projection uses the
pinhole model from CameraView with z forward, pixels as (column, row).
"""

import math
import warnings
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from langrasp.geometry import GraspPose2D, GraspRect, canonical_angle, pose_to_rect
from langrasp.data.types import CameraView, Grasp6D, PartAnnotation

_BEHIND_EPS = 1e-9


def assign_grasps_to_parts(
    parts: Sequence[Tuple[str, np.ndarray]],
    grasps: Sequence[Grasp6D],
    object_id: str = "",
) -> List[PartAnnotation]:
    """Assign each grasp to its nearest part by point-set distance.

    parts is a sequence of (name, (N, 3) points) pairs. Returns one
    PartAnnotation per part, in input order, whose assigned_grasps together
    partition `grasps`. Distance is the minimum Euclidean distance from the
    grasp position to the part's points; exact ties pick the lowest part index.
    """
    if len(parts) == 0:
        raise ValueError("parts must be non-empty")
    names = [name for name, _ in parts]
    if len(set(names)) != len(names):
        raise ValueError(f"part names must be unique, got {names}")
    point_sets = [np.asarray(pts, dtype=np.float64) for _, pts in parts]
    assigned: List[List[Grasp6D]] = [[] for _ in parts]
    for grasp in grasps:
        best = 0
        best_d = math.inf
        for pi, pts in enumerate(point_sets):
            diff = pts - grasp.position
            d = float(np.sqrt((diff * diff).sum(axis=1)).min())
            if d < best_d:
                best_d = d
                best = pi
        assigned[best].append(grasp)
    return [
        PartAnnotation(object_id=object_id, part_name=name, part_points=pts,
                       assigned_grasps=tuple(assigned[pi]))
        for pi, ((name, _), pts) in enumerate(zip(parts, point_sets))
    ]


def project_points(points: np.ndarray, view: CameraView) -> np.ndarray:
    """Project (N, 3) object-frame points to (N, 2) pixel (column, row).

    Points at or behind the camera plane (z <= eps) are dropped.
    """
    cam = view.to_camera(points)
    keep = cam[:, 2] > _BEHIND_EPS
    cam = cam[keep]
    if len(cam) == 0:
        return np.zeros((0, 2), dtype=np.float64)
    k = view.intrinsics
    u = k[0, 0] * cam[:, 0] / cam[:, 2] + k[0, 2]
    v = k[1, 1] * cam[:, 1] / cam[:, 2] + k[1, 2]
    return np.stack([u, v], axis=1)


def project_part_to_mask(part: PartAnnotation, view: CameraView) -> np.ndarray:
    """Rasterize a part's projected points into a boolean (H, W) mask.

    Each visible point marks its nearest pixel; a 3x3 binary closing then
    bridges one-pixel gaps. Points projecting outside the image are ignored.
    If every point sits behind the camera the mask is empty and a warning is
    issued, since downstream grounding has nothing to aim at.
    """
    h, w = view.image_size
    mask = np.zeros((h, w), dtype=bool)
    px = project_points(part.part_points, view)
    if len(px) == 0:
        warnings.warn(
            f"part {part.part_name!r}: all points behind the camera, mask is empty",
            stacklevel=2,
        )
        return mask
    cols = np.rint(px[:, 0]).astype(int)
    rows = np.rint(px[:, 1]).astype(int)
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    mask[rows[ok], cols[ok]] = True
    if mask.any():
        mask = ndimage.binary_closing(mask, structure=np.ones((3, 3), dtype=bool))
    return mask


def project_grasp_to_rect(
    grasp: Grasp6D, view: CameraView, jaw_ratio: float = 0.5
) -> GraspRect:
    """Project a 3-D grasp into an oriented image rectangle.

    The grasp center projects to (x, y); the two jaw tips
    p +- (width/2) * closing_axis give the image-plane opening direction
    (theta) and the projected opening width. Raises ValueError if the center
    or a tip lies behind the camera, or if the projected opening collapses.
    """
    pts = np.stack(
        [
            grasp.position,
            grasp.position - 0.5 * grasp.width * grasp.closing_axis,
            grasp.position + 0.5 * grasp.width * grasp.closing_axis,
        ]
    )
    cam = view.to_camera(pts)
    if np.any(cam[:, 2] <= _BEHIND_EPS):
        raise ValueError("grasp projects behind the camera")
    k = view.intrinsics
    u = k[0, 0] * cam[:, 0] / cam[:, 2] + k[0, 2]
    v = k[1, 1] * cam[:, 1] / cam[:, 2] + k[1, 2]
    du = float(u[2] - u[1])
    dv = float(v[2] - v[1])
    width = math.hypot(du, dv)
    if width < 1e-6:
        raise ValueError("grasp opening projects to a degenerate segment")
    pose = GraspPose2D(
        x=float(u[0]),
        y=float(v[0]),
        theta=canonical_angle(math.atan2(dv, du)),
        width=width,
        quality=grasp.score,
    )
    return pose_to_rect(pose, jaw_ratio=jaw_ratio)
