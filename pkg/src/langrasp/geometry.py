"""Planar grasp geometry: poses, oriented rectangles, and grasp-map encodings.

Coordinate conventions used across the package:
  - Image coordinates: x is the column index, y is the row index (y grows
    downward). Pixel centers sit at integer coordinates.
  - Angles are measured in radians from the +x axis toward +y and are kept
    canonical in [-pi/2, pi/2); a grasp rotated by pi is the same grasp.
  - A grasp pose (x, y, theta, width, quality) opens along direction theta:
    the jaws travel along theta and close on material lying across it.

The map encoding follows the four-channel convention of convolutional grasp
detectors: per-pixel quality in [0, 1], the doubled angle as cos/sin pairs in
[-1, 1] (continuous across the pi symmetry), and opening width normalized by a
width ceiling.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

HALF_PI = math.pi / 2.0


def canonical_angle(theta: float) -> float:
    """Map an angle to [-pi/2, pi/2), identifying theta with theta + pi.

    Uses IEEE remainder, which is exact, so inputs already expressible as a
    canonical angle plus an exactly representable multiple of pi come back
    bit-identical.
    """
    t = math.remainder(float(theta), math.pi)
    if t >= HALF_PI:
        t -= math.pi
    elif t < -HALF_PI:  # |remainder| <= pi/2, so only the +pi/2 endpoint needs folding
        t += math.pi
    return t + 0.0  # normalize -0.0


@dataclass(frozen=True)
class GraspPose2D:
    """A planar grasp: center (x, y) px, opening direction, opening width px, quality.

    The angle is canonicalized at construction so equality is structural:
    poses built with theta and theta + pi compare equal.
    """

    x: float
    y: float
    theta: float
    width: float
    quality: float = 1.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "theta", "width", "quality"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"GraspPose2D.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.width < 0.0:
            raise ValueError(f"GraspPose2D.width must be >= 0, got {self.width}")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"GraspPose2D.quality must be in [0, 1], got {self.quality}")
        object.__setattr__(self, "theta", canonical_angle(self.theta))


class GraspRect:
    """Oriented grasp rectangle given by four (x, y) corners, counterclockwise.

    Counterclockwise means positive shoelace area in the (x right, y down)
    image frame; clockwise input is reordered, other corner orders rejected.
    The first edge (corners[0] -> corners[1]) runs along the opening axis, so
    ``angle`` and ``width`` derive from it; the second edge is the jaw extent.
    """

    _REL_TOL = 1e-6

    def __init__(self, corners: np.ndarray):
        c = np.asarray(corners, dtype=np.float64)
        if c.shape != (4, 2):
            raise ValueError(f"corners must have shape (4, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("corners must be finite")
        if _shoelace(c) < 0.0:
            c = c[[1, 0, 3, 2]]  # flip orientation, keep edge 0 on the opening axis
        edges = np.roll(c, -1, axis=0) - c
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        scale = float(lengths.max())
        if scale <= 0.0 or lengths.min() <= self._REL_TOL * scale:
            raise ValueError("degenerate rectangle: zero-length edge")
        if (
            np.hypot(*(edges[0] + edges[2])) > self._REL_TOL * scale
            or np.hypot(*(edges[1] + edges[3])) > self._REL_TOL * scale
            or abs(float(np.dot(edges[0], edges[1]))) > self._REL_TOL * scale * scale
        ):
            raise ValueError("corners do not form a rectangle within tolerance")
        c.setflags(write=False)
        self.corners = c

    @property
    def center(self) -> Tuple[float, float]:
        cx, cy = self.corners.mean(axis=0)
        return float(cx), float(cy)

    @property
    def angle(self) -> float:
        e = self.corners[1] - self.corners[0]
        return canonical_angle(math.atan2(float(e[1]), float(e[0])))

    @property
    def width(self) -> float:
        """Opening extent (length of the first edge)."""
        e = self.corners[1] - self.corners[0]
        return float(np.hypot(e[0], e[1]))

    @property
    def height(self) -> float:
        """Jaw extent (length of the second edge)."""
        e = self.corners[2] - self.corners[1]
        return float(np.hypot(e[0], e[1]))

    @property
    def area(self) -> float:
        return abs(_shoelace(self.corners)) / 2.0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraspRect):
            return NotImplemented
        return bool(np.array_equal(self.corners, other.corners))

    def __hash__(self) -> int:
        return hash(self.corners.tobytes())

    def __repr__(self) -> str:
        cx, cy = self.center
        return (
            f"GraspRect(center=({cx:.2f}, {cy:.2f}), angle={self.angle:.3f}, "
            f"width={self.width:.2f}, height={self.height:.2f})"
        )


def rect_from_params(x: float, y: float, theta: float, width: float, height: float) -> GraspRect:
    """Build an oriented rectangle from center, opening angle, and extents."""
    if width <= 0.0 or height <= 0.0:
        raise ValueError(f"width and height must be > 0, got {width}, {height}")
    t = canonical_angle(theta)
    ux, uy = math.cos(t), math.sin(t)
    ax, ay = 0.5 * width * ux, 0.5 * width * uy
    bx, by = 0.5 * height * -uy, 0.5 * height * ux
    corners = np.array(
        [
            [x - ax - bx, y - ay - by],
            [x + ax - bx, y + ay - by],
            [x + ax + bx, y + ay + by],
            [x - ax + bx, y - ay + by],
        ]
    )
    return GraspRect(corners)


def pose_to_rect(pose: GraspPose2D, jaw_ratio: float = 0.5) -> GraspRect:
    """Convert a pose to its oriented rectangle; jaw extent is jaw_ratio * width."""
    if pose.width <= 0.0:
        raise ValueError(f"pose width must be > 0 to form a rectangle, got {pose.width}")
    if jaw_ratio <= 0.0:
        raise ValueError(f"jaw_ratio must be > 0, got {jaw_ratio}")
    return rect_from_params(pose.x, pose.y, pose.theta, pose.width, jaw_ratio * pose.width)


# ---------------------------------------------------------------------------
# Rectangle overlap via convex polygon clipping
# ---------------------------------------------------------------------------


def _shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly: np.ndarray) -> float:
    """Unsigned area of a simple polygon given as an (N, 2) vertex array."""
    poly = np.asarray(poly, dtype=np.float64)
    if len(poly) < 3:
        return 0.0
    return abs(_shoelace(poly)) / 2.0


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon against a convex counterclockwise one.

    Returns the intersection polygon, possibly empty. Points on a clip edge
    count as inside.
    """
    output = [np.asarray(p, dtype=np.float64) for p in subject]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        polygon, output = output, []
        prev = polygon[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= 0.0
        for cur in polygon:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                output.append(_edge_intersection(prev, cur, a, b))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.empty((0, 2))


def _edge_intersection(p: np.ndarray, q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection of segment p-q with the infinite line through a-b."""
    dx, dy = q[0] - p[0], q[1] - p[1]
    ex, ey = b[0] - a[0], b[1] - a[1]
    denom = ex * dy - ey * dx
    # caller only asks when p and q straddle the line, so denom is nonzero
    t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom
    return np.array([p[0] + t * dx, p[1] + t * dy])


def rect_iou(a: GraspRect, b: GraspRect) -> float:
    """Exact intersection-over-union of two oriented rectangles."""
    inter = polygon_area(clip_polygon(a.corners, b.corners))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def angle_delta(a: float, b: float) -> float:
    """Absolute angular difference under the theta ~ theta + pi identification."""
    return abs(math.remainder(float(a) - float(b), math.pi))


def is_valid_grasp(
    pred_pose: GraspPose2D,
    gt_rects: Sequence[GraspRect],
    iou_thresh: float = 0.25,
    angle_thresh: float = math.radians(30.0),
    jaw_ratio: float = 0.5,
) -> bool:
    """Rectangle-metric hit test: IoU strictly above iou_thresh against any
    ground-truth rectangle whose opening angle differs by strictly less than
    angle_thresh (radians)."""
    if len(gt_rects) == 0:
        raise ValueError("is_valid_grasp needs at least one ground-truth rectangle")
    pred_rect = pose_to_rect(pred_pose, jaw_ratio=jaw_ratio)
    for gt in gt_rects:
        if angle_delta(pred_pose.theta, gt.angle) < angle_thresh and rect_iou(pred_rect, gt) > iou_thresh:
            return True
    return False


# ---------------------------------------------------------------------------
# Grasp-map encoding
# ---------------------------------------------------------------------------


@dataclass
class GraspMaps:
    """Four per-pixel grasp maps of a common (H, W) shape.

    quality in [0, 1]; cos2/sin2 encode the doubled opening angle in [-1, 1];
    width is the opening extent normalized by the rasterizer's width ceiling.
    Detector outputs share this container, so cos2/sin2 are not required to be
    unit-norm; the rasterizer produces exact pairs wherever quality > 0.
    """

    quality: np.ndarray
    cos2: np.ndarray
    sin2: np.ndarray
    width: np.ndarray

    def __post_init__(self) -> None:
        arrays = {}
        for name in ("quality", "cos2", "sin2", "width"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"GraspMaps.{name} must be 2-D, got shape {arr.shape}")
            arrays[name] = arr
        shape = arrays["quality"].shape
        for name, arr in arrays.items():
            if arr.shape != shape:
                raise ValueError(f"GraspMaps.{name} shape {arr.shape} != quality shape {shape}")
            setattr(self, name, arr)
        eps = 1e-6
        if self.quality.min() < -eps or self.quality.max() > 1.0 + eps:
            raise ValueError("quality map outside [0, 1]")
        if self.width.min() < -eps or self.width.max() > 1.0 + eps:
            raise ValueError("width map outside [0, 1]")
        for name in ("cos2", "sin2"):
            arr = arrays[name]
            if arr.min() < -1.0 - eps or arr.max() > 1.0 + eps:
                raise ValueError(f"{name} map outside [-1, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.quality.shape


def rasterize_gt_maps(
    gt_rects: Sequence[GraspRect],
    image_size: Tuple[int, int],
    width_max: float,
    center_fraction: float = 1.0 / 3.0,
) -> GraspMaps:
    """Rasterize ground-truth rectangles into the four-map encoding.

    Each rectangle stamps its central band (the middle center_fraction of the
    jaw extent, full opening extent) with quality 1, its doubled-angle pair,
    and its clipped normalized width. Later rectangles overwrite earlier ones
    where bands overlap. Every rectangle must lie within the image.
    """
    h, w = int(image_size[0]), int(image_size[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"image_size must be positive, got {image_size}")
    if width_max <= 0.0:
        raise ValueError(f"width_max must be > 0, got {width_max}")
    if not 0.0 < center_fraction <= 1.0:
        raise ValueError(f"center_fraction must be in (0, 1], got {center_fraction}")

    quality = np.zeros((h, w))
    cos2 = np.zeros((h, w))
    sin2 = np.zeros((h, w))
    width_map = np.zeros((h, w))

    for index, rect in enumerate(gt_rects):
        xs, ys = rect.corners[:, 0], rect.corners[:, 1]
        if xs.min() < 0.0 or xs.max() > w - 1.0 or ys.min() < 0.0 or ys.max() > h - 1.0:
            raise ValueError(f"rectangle {index} extends outside the {h}x{w} image")
        cx, cy = rect.center
        theta = rect.angle
        ux, uy = math.cos(theta), math.sin(theta)
        half_open = rect.width / 2.0
        half_jaw = rect.height / 2.0 * center_fraction

        x0 = int(math.floor(cx - half_open - half_jaw))
        x1 = int(math.ceil(cx + half_open + half_jaw))
        y0 = int(math.floor(cy - half_open - half_jaw))
        y1 = int(math.ceil(cy + half_open + half_jaw))
        x0, x1 = max(x0, 0), min(x1, w - 1)
        y0, y1 = max(y0, 0), min(y1, h - 1)

        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        dx, dy = gx - cx, gy - cy
        band = (np.abs(dx * ux + dy * uy) <= half_open) & (np.abs(-dx * uy + dy * ux) <= half_jaw)
        rows, cols = gy[band], gx[band]
        quality[rows, cols] = 1.0
        cos2[rows, cols] = math.cos(2.0 * theta)
        sin2[rows, cols] = math.sin(2.0 * theta)
        width_map[rows, cols] = min(rect.width, width_max) / width_max

    return GraspMaps(quality=quality, cos2=cos2, sin2=sin2, width=width_map)


def decode_grasps(
    maps: GraspMaps,
    k: int,
    width_max: float,
    min_peak_dist: float = 8.0,
    smoothing_sigma: float = 2.0,
) -> List[GraspPose2D]:
    """Extract up to k poses from grasp maps via smoothed-quality peaks.

    The quality map is Gaussian-smoothed and local maxima are found within a
    min_peak_dist neighborhood. A raw argmax wanders along nearly flat stamp
    ridges, so each peak is refined: take the connected region where the
    smoothed map stays above a quarter of the peak value, keep its strong
    raw-quality pixels, and re-center via the midrange of their projections
    onto the opening/jaw axes given by the angle maps (the support extremes
    of a solid stamp pin its center far more tightly than a centroid does).
    Refined peaks closer than min_peak_dist to a stronger one are suppressed.
    Angle comes from atan2 of the doubled-angle maps, width from the width
    map scaled by width_max, quality from the raw quality map, all read at
    the region's highest-raw-quality pixel (identical to the center pixel on
    an exact stamp, the best-supported pixel on a learned map).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if width_max <= 0.0:
        raise ValueError(f"width_max must be > 0, got {width_max}")
    if min_peak_dist < 1.0:
        raise ValueError(f"min_peak_dist must be >= 1, got {min_peak_dist}")

    quality = np.asarray(maps.quality, dtype=np.float64)
    if not np.any(quality > 0.0):
        return []

    smooth = ndimage.gaussian_filter(quality, sigma=smoothing_sigma, mode="constant", cval=0.0) if smoothing_sigma > 0 else quality
    size = 2 * int(math.ceil(min_peak_dist)) + 1
    local_max = ndimage.maximum_filter(smooth, size=size, mode="constant", cval=0.0)
    candidates = (smooth == local_max) & (smooth > 0.0)
    if not np.any(candidates):
        return []

    eight = np.ones((3, 3), dtype=bool)
    h, w = quality.shape
    labels, count = ndimage.label(candidates, structure=eight)
    centroids = ndimage.center_of_mass(candidates, labels, range(1, count + 1))
    peaks = []
    for cy, cx in centroids:
        py = min(max(int(round(cy)), 0), h - 1)
        px = min(max(int(round(cx)), 0), w - 1)
        peaks.append((float(smooth[py, px]), py, px))
    peaks.sort(key=lambda p: (-p[0], p[1], p[2]))

    poses: List[GraspPose2D] = []
    kept: List[Tuple[float, float]] = []
    for value, py, px in peaks:
        if len(poses) == k:
            break
        cy, cx, vy, vx = _refine_peak(quality, smooth, maps, value, py, px, eight)
        if any(math.hypot(cx - ox, cy - oy) < min_peak_dist for ox, oy in kept):
            continue
        theta = 0.5 * math.atan2(float(maps.sin2[vy, vx]), float(maps.cos2[vy, vx]))
        width = float(np.clip(maps.width[vy, vx], 0.0, 1.0)) * width_max
        q = float(np.clip(quality[vy, vx], 0.0, 1.0))
        poses.append(GraspPose2D(x=cx, y=cy, theta=theta, width=width, quality=q))
        kept.append((cx, cy))
    return poses


def _refine_peak(quality, smooth, maps, value, py, px, structure):
    """Sub-pixel stamp center plus the crest pixel for the value reads.

    The center comes from the midrange of the strong pixels' projections; the
    angle/width/quality reads happen at the strong region's raw-quality argmax
    (the highest-quality point). On an exact stamp both coincide with the
    rectangle center; on a learned map the crest carries the best-supported
    values while the midrange stays the tightest center estimate.
    """
    level_labels, _ = ndimage.label(smooth >= 0.25 * value, structure=structure)
    region = level_labels == level_labels[py, px]
    ys, xs = np.nonzero(region)
    qvals = quality[ys, xs]
    peak_q = float(quality[py, px])
    strong = qvals > 0.5 * peak_q if peak_q > 0.0 else np.ones(len(ys), dtype=bool)
    if not np.any(strong):
        strong = np.ones(len(ys), dtype=bool)
    ys, xs, qvals = ys[strong], xs[strong], qvals[strong]
    crest = int(np.argmax(qvals))
    vy, vx = int(ys[crest]), int(xs[crest])
    weights = np.where(qvals > 0.0, qvals, 1e-12)
    cy = float((ys * weights).sum() / weights.sum())
    cx = float((xs * weights).sum() / weights.sum())
    theta = 0.5 * math.atan2(float(maps.sin2[vy, vx]), float(maps.cos2[vy, vx]))
    ux, uy = math.cos(theta), math.sin(theta)
    t_open = (xs - cx) * ux + (ys - cy) * uy
    t_jaw = -(xs - cx) * uy + (ys - cy) * ux
    d_open = (float(t_open.max()) + float(t_open.min())) / 2.0
    d_jaw = (float(t_jaw.max()) + float(t_jaw.min())) / 2.0
    return cy + d_open * uy + d_jaw * ux, cx + d_open * ux - d_jaw * uy, vy, vx


# ---------------------------------------------------------------------------
# Rectangle file format
# ---------------------------------------------------------------------------


def save_rects(path, rects: Sequence[GraspRect]) -> None:
    """Write rectangles, one per line, as 8 floats: row col per corner, CCW."""
    lines = []
    for rect in rects:
        values = []
        for x, y in rect.corners:
            values.extend((repr(float(y)), repr(float(x))))
        lines.append(" ".join(values))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_rects(path) -> List[GraspRect]:
    """Read rectangles written by save_rects; malformed lines name their number."""
    rects = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}: line {lineno}: expected 8 floats, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            corners = np.array(vals).reshape(4, 2)[:, ::-1]  # stored row col -> (x, y)
            try:
                rects.append(GraspRect(corners))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return rects
