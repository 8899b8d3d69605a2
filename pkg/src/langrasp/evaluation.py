"""Rectangle-metric evaluation: token accuracy, R@k per scenario cell, reports.

Every model kind funnels through the same decode -> is_valid_grasp path so the
numbers stay comparable; per-kind differences live in thin prediction handles.
"""

import json
import math
import os
import re
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .baselines import ClipStyleModel, GroundingFailure, ModularPipeline, UnconditionedDetector
from .data.types import InstructionSample
from .geometry import GraspPose2D, GraspRect, decode_grasps, is_valid_grasp, pose_to_rect
from .model import InstructionGraspModel
from .training import ImageCache
from .vlm.spans import EmptyTargetError, MissingTargetError, extract_target_span
from .vocab import Vocab

PRED_COLOR = (230, 60, 60)
GT_COLOR = (40, 200, 90)


@dataclass(frozen=True)
class EvalConfig:
    k_list: Tuple[int, ...] = (1, 3)
    width_max: float = 150.0
    min_peak_dist: float = 8.0
    smoothing_sigma: float = 2.0
    max_new: int = 24

    def __post_init__(self) -> None:
        ks = tuple(int(k) for k in self.k_list)
        if not ks or any(k < 1 for k in ks) or tuple(sorted(set(ks))) != ks:
            raise ValueError(f"k_list must be strictly increasing positive ints, got {self.k_list}")
        object.__setattr__(self, "k_list", ks)
        if self.width_max <= 0.0:
            raise ValueError("width_max must be positive")


def normalize_name(text: str) -> str:
    """Whitespace-collapsed, case-folded form used for target-name matching."""
    return re.sub(r"\s+", " ", text).strip().casefold()


def token_accuracy(response_ids: Sequence[int], sample: InstructionSample, vocab: Vocab) -> bool:
    """True iff the response wraps a span that names the sample's target."""
    try:
        span = extract_target_span(list(response_ids))
    except (MissingTargetError, EmptyTargetError):
        return False
    name = vocab.decode(list(response_ids[span.start : span.end]))
    return normalize_name(name) == normalize_name(sample.target_name)


@dataclass(frozen=True)
class EvalPrediction:
    poses: Tuple[GraspPose2D, ...]
    response_ids: Tuple[int, ...] = ()
    failure: Optional[str] = None


@dataclass(frozen=True)
class CellMetrics:
    count: int
    token_accuracy: float
    r_at_k: Dict[int, float]
    failures: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        fractions = [self.token_accuracy] + list(self.r_at_k.values())
        if any(not (0.0 <= v <= 1.0) for v in fractions):
            raise ValueError(f"metric fractions must lie in [0, 1], got {fractions}")
        ks = sorted(self.r_at_k)
        for lo, hi in zip(ks, ks[1:]):
            if self.r_at_k[lo] > self.r_at_k[hi] + 1e-12:
                raise ValueError(f"R@{lo} > R@{hi} violates top-k monotonicity")


@dataclass(frozen=True)
class EvalReport:
    k_list: Tuple[int, ...]
    cells: Dict[Tuple[str, str], CellMetrics] = field(default_factory=dict)

    def cell(self, instruction_kind: str, target_level: str) -> CellMetrics:
        return self.cells[(instruction_kind, target_level)]


# ---- prediction handles per model kind ----


class _BaseHandle:
    vocab: Optional[Vocab] = None

    def decode(self, maps, config: EvalConfig) -> Tuple[GraspPose2D, ...]:
        return tuple(
            decode_grasps(
                maps,
                k=max(config.k_list),
                width_max=config.width_max,
                min_peak_dist=config.min_peak_dist,
                smoothing_sigma=config.smoothing_sigma,
            )
        )


class InstructionGraspHandle(_BaseHandle):
    def __init__(self, model: InstructionGraspModel) -> None:
        self.model = model
        self.vocab = model.vocab
        self.in_channels = model.head.config.in_channels

    def eval_predict(self, sample, image, head_image, config: EvalConfig) -> EvalPrediction:
        result = self.model.infer(image, sample.instruction, head_image=head_image, max_new=config.max_new)
        return EvalPrediction(self.decode(result.maps, config), tuple(result.response_ids), result.failure)


class ClipStyleHandle(_BaseHandle):
    def __init__(self, model: ClipStyleModel) -> None:
        self.model = model
        self.in_channels = model.head.config.in_channels

    def eval_predict(self, sample, image, head_image, config: EvalConfig) -> EvalPrediction:
        return EvalPrediction(self.decode(self.model.predict_maps(head_image, sample.instruction), config))


class UnconditionedHandle(_BaseHandle):
    def __init__(self, detector: UnconditionedDetector) -> None:
        self.detector = detector
        self.in_channels = detector.head.config.in_channels

    def eval_predict(self, sample, image, head_image, config: EvalConfig) -> EvalPrediction:
        return EvalPrediction(self.decode(self.detector.predict_maps(head_image), config))


class ModularHandle(_BaseHandle):
    def __init__(self, pipeline: ModularPipeline) -> None:
        self.pipeline = pipeline
        self.in_channels = pipeline.detector.head.config.in_channels

    def eval_predict(self, sample, image, head_image, config: EvalConfig) -> EvalPrediction:
        try:
            poses = self.pipeline.predict(
                head_image, sample.instruction, scene_id=sample.scene_id, k=max(config.k_list)
            )
        except GroundingFailure:
            return EvalPrediction((), failure="grounding_failure")
        return EvalPrediction(tuple(poses))


def make_handle(model):
    """Wrap a model in its evaluation handle; pass through custom handles."""
    if hasattr(model, "eval_predict"):
        return model
    if isinstance(model, InstructionGraspModel):
        return InstructionGraspHandle(model)
    if isinstance(model, ClipStyleModel):
        return ClipStyleHandle(model)
    if isinstance(model, UnconditionedDetector):
        return UnconditionedHandle(model)
    if isinstance(model, ModularPipeline):
        return ModularHandle(model)
    raise TypeError(f"no evaluation handle for {type(model).__name__}")


# ---- the evaluation loop ----


def evaluate_model(
    model,
    samples: Sequence[InstructionSample],
    config: Optional[EvalConfig] = None,
    cache: Optional[ImageCache] = None,
) -> EvalReport:
    """Rectangle-metric R@k and token accuracy per (instruction_kind, target_level)."""
    config = config or EvalConfig()
    samples = list(samples)
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    handle = make_handle(model)
    cache = cache or ImageCache()
    buckets: Dict[Tuple[str, str], dict] = {}
    for index, sample in enumerate(samples):
        image = cache.get(sample.image_path)
        if handle.in_channels == 4:
            if sample.depth_path is None:
                raise ValueError(f"sample {sample.scene_id}: model wants depth but sample has none")
            head_image = cache.get(sample.image_path, sample.depth_path)
        else:
            head_image = image
        with torch.no_grad():
            pred = handle.eval_predict(sample, image, head_image, config)
        vocab = getattr(handle, "vocab", None)
        token_ok = bool(pred.response_ids) and vocab is not None and token_accuracy(
            pred.response_ids, sample, vocab
        )
        hits = [is_valid_grasp(pose, sample.gt_rects) for pose in pred.poses]
        key = (sample.instruction_kind, sample.target_level)
        bucket = buckets.setdefault(
            key, {"count": 0, "token": 0, "hits": {k: 0 for k in config.k_list}, "failures": []}
        )
        bucket["count"] += 1
        bucket["token"] += int(token_ok)
        for k in config.k_list:
            bucket["hits"][k] += int(any(hits[:k]))
        if pred.failure is not None:
            bucket["failures"].append((f"{index:04d}:{sample.scene_id}", pred.failure))
    cells = {
        key: CellMetrics(
            count=b["count"],
            token_accuracy=b["token"] / b["count"],
            r_at_k={k: b["hits"][k] / b["count"] for k in config.k_list},
            failures=tuple(b["failures"]),
        )
        for key, b in buckets.items()
    }
    return EvalReport(k_list=config.k_list, cells=cells)


# ---- report files ----


def save_report(report: EvalReport, out_dir: str) -> Tuple[str, str]:
    """Write report.jsonl (machine-readable, reproducible bytes) and report.txt."""
    os.makedirs(out_dir, exist_ok=True)
    jsonl_path = os.path.join(out_dir, "report.jsonl")
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for (kind, level) in sorted(report.cells):
            cell = report.cells[(kind, level)]
            record = {
                "instruction_kind": kind,
                "target_level": level,
                "count": cell.count,
                "token_accuracy": round(cell.token_accuracy, 6),
                "r_at_k": {str(k): round(v, 6) for k, v in sorted(cell.r_at_k.items())},
                "failures": [list(f) for f in cell.failures],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(format_report_table(report))
    return jsonl_path, txt_path


def format_report_table(report: EvalReport) -> str:
    header = f"{'instruction':<12} {'target':<8} {'count':>5} {'token_acc':>9}"
    header += "".join(f" {'R@' + str(k):>7}" for k in report.k_list)
    lines = [header]
    for (kind, level) in sorted(report.cells):
        cell = report.cells[(kind, level)]
        row = f"{kind:<12} {level:<8} {cell.count:>5} {cell.token_accuracy:>9.4f}"
        row += "".join(f" {cell.r_at_k[k]:>7.4f}" for k in report.k_list)
        lines.append(row)
    total_failures = sum(len(c.failures) for c in report.cells.values())
    lines.append(f"failures: {total_failures}")
    return "\n".join(lines) + "\n"


def read_report(directory: str) -> EvalReport:
    path = os.path.join(directory, "report.jsonl")
    cells: Dict[Tuple[str, str], CellMetrics] = {}
    k_list: Tuple[int, ...] = ()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            r_at_k = {int(k): v for k, v in rec["r_at_k"].items()}
            k_list = tuple(sorted(r_at_k))
            cells[(rec["instruction_kind"], rec["target_level"])] = CellMetrics(
                count=rec["count"],
                token_accuracy=rec["token_accuracy"],
                r_at_k=r_at_k,
                failures=tuple((s, k) for s, k in rec["failures"]),
            )
    return EvalReport(k_list=k_list, cells=cells)


# ---- annotated images ----


def rect_pixel_corners(pose: GraspPose2D, jaw_ratio: float = 0.5) -> List[Tuple[int, int]]:
    """Overlay corners: pose_to_rect corners rounded to integer pixels."""
    rect = pose_to_rect(pose, jaw_ratio=jaw_ratio)
    return [(int(round(float(x))), int(round(float(y)))) for x, y in rect.corners]


def _as_uint8_image(image) -> np.ndarray:
    if isinstance(image, str):
        with Image.open(image) as img:
            return np.asarray(img.convert("RGB"))
    if isinstance(image, torch.Tensor):
        if image.dim() != 3:
            raise ValueError(f"expected a (C, H, W) tensor, got {tuple(image.shape)}")
        rgb = image[:3].clamp(0.0, 1.0)
        return (rgb * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    array = np.asarray(image)
    if array.ndim != 3 or array.shape[2] != 3 or array.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {array.shape} {array.dtype}")
    return array


def _draw_dashed(draw: ImageDraw.ImageDraw, corners, color, dash: float = 3.0) -> None:
    points = list(corners) + [corners[0]]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        length = math.hypot(x1 - x0, y1 - y0)
        steps = max(int(round(length / dash)), 1)
        for s in range(0, steps, 2):
            t0, t1 = s / steps, min((s + 1) / steps, 1.0)
            draw.line(
                [(x0 + (x1 - x0) * t0, y0 + (y1 - y0) * t0), (x0 + (x1 - x0) * t1, y0 + (y1 - y0) * t1)],
                fill=color,
                width=1,
            )


def render_annotated(
    image,
    poses: Sequence[GraspPose2D],
    gts: Optional[Sequence[GraspRect]] = None,
    out_path: Optional[str] = None,
    jaw_ratio: float = 0.5,
) -> np.ndarray:
    """Draw predictions (solid) and GT rects (dashed); optionally save a PNG."""
    array = _as_uint8_image(image)
    canvas = Image.fromarray(array.copy())
    draw = ImageDraw.Draw(canvas)
    height, width = array.shape[0], array.shape[1]
    for rect in gts or ():
        _draw_dashed(draw, [(float(x), float(y)) for x, y in rect.corners], GT_COLOR)
    for pose in poses:
        corners = rect_pixel_corners(pose, jaw_ratio=jaw_ratio)
        if any(not (0 <= x <= width - 1 and 0 <= y <= height - 1) for x, y in corners):
            warnings.warn(
                f"grasp at ({pose.x:.1f}, {pose.y:.1f}) extends outside the {height}x{width} image, drawing clipped"
            )
        draw.line(corners + corners[:1], fill=PRED_COLOR, width=1)
        label_x = min(max(corners[0][0], 0), width - 1)
        label_y = min(max(corners[0][1] - 10, 0), height - 1)
        draw.text((label_x, label_y), f"{pose.quality:.2f}", fill=PRED_COLOR)
    result = np.asarray(canvas)
    if out_path is not None:
        canvas.save(out_path, format="PNG")
    return result
