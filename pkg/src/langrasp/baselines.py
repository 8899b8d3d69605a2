"""Comparison systems sharing the grasp head and evaluation plumbing.

Two baselines:

* ClipStyleModel: a bag-of-words text encoder plus linear projection stands
  in for a contrastive text encoder; its feature replaces the fusion vector
  f in an otherwise identical grasp head. No special tokens, no language
  loss; trained with the grasp loss alone.
* ModularPipeline: a grounder (external vision-language client, or the
  oracle/stub versions here) names a bounding box in strict "x0,y0,x1,y1"
  text; the crop is upsampled to a text-free detector's input size and the
  decoded poses are mapped back to full-image coordinates.
"""

from __future__ import annotations

import base64
import io
import json
import math
import os
import re
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from PIL import Image

from .checkpoint import read_module_checkpoint, save_module_checkpoint
from .data.instructions import API_KEY_ENV
from .data.synthetic import load_scene_specs, render_object_mask
from .geometry import GraspMaps, GraspPose2D, canonical_angle, decode_grasps, rasterize_gt_maps
from .grasp_head import GraspHead, GraspHeadConfig, grasp_loss, maps_to_tensor
from .vocab import PAD_ID, Vocab

CLIP_KIND = "clip_style"
DETECTOR_KIND = "unconditioned_detector"

BOX_PATTERN = re.compile(r"(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)")
GROUND_PROMPT = 'Output the bounding box of the grasp target for: "{instruction}"'
RETRY_SUFFIX = ' Respond only with four numbers in the exact form "x0,y0,x1,y1".'


class GroundingFailure(Exception):
    """The grounder produced no parseable bounding box after a retry."""


class ClipStyleModel(nn.Module):
    """Bag-of-words instruction feature fused into the grasp head."""

    def __init__(self, vocab: Vocab, head_config: GraspHeadConfig, text_dim: int = 64) -> None:
        super().__init__()
        if text_dim < 1:
            raise ValueError("text_dim must be positive")
        self.vocab = vocab
        self.text_dim = text_dim
        self.token_embedding = nn.Embedding(len(vocab), text_dim)
        self.text_proj = nn.Linear(text_dim, head_config.fusion_dim)
        self.head = GraspHead(head_config)

    def encode_instructions(self, instructions: Sequence[str]) -> torch.Tensor:
        """Right-padded token id batch for a list of instructions."""
        rows = [self.vocab.encode(text) for text in instructions]
        length = max((len(r) for r in rows), default=0)
        ids = torch.full((len(rows), max(length, 1)), PAD_ID, dtype=torch.long)
        for i, row in enumerate(rows):
            if row:
                ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        return ids

    def text_feature(self, ids: torch.Tensor) -> torch.Tensor:
        """Mean embedding over non-pad tokens, linearly projected."""
        if ids.dim() != 2:
            raise ValueError(f"ids must be (B, S), got {tuple(ids.shape)}")
        mask = (ids != PAD_ID).float().unsqueeze(-1)
        summed = (self.token_embedding(ids) * mask).sum(dim=1)
        counts = mask.sum(dim=1).clamp(min=1.0)
        return self.text_proj(summed / counts)

    def forward(self, images: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        return self.head(images, self.text_feature(ids))

    @torch.no_grad()
    def predict_maps(self, image: torch.Tensor, instruction: str) -> GraspMaps:
        ids = self.encode_instructions([instruction])
        feature = self.text_feature(ids)
        return self.head.predict_maps(image, feature[0])


class UnconditionedDetector(nn.Module):
    """The grasp head with the fusion feature pinned to zero (no text)."""

    def __init__(self, head_config: GraspHeadConfig) -> None:
        super().__init__()
        self.head = GraspHead(head_config)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        batch = images.shape[0] if images.dim() == 4 else 1
        zeros = images.new_zeros(batch, self.head.config.fusion_dim)
        return self.head(images, zeros if images.dim() == 4 else zeros[0])

    @torch.no_grad()
    def predict_maps(self, image: torch.Tensor) -> GraspMaps:
        return self.head.predict_maps(image, image.new_zeros(self.head.config.fusion_dim))


# ---- grounders ----


class Grounder(Protocol):
    def ground(self, image: torch.Tensor, prompt: str, scene_id: Optional[str]) -> str:
        """Return free text expected to contain "x0,y0,x1,y1"."""


class OracleGrounder:
    """Looks up the true box by (scene_id, instruction); synthetic data only."""

    def __init__(self, boxes: Dict[Tuple[str, str], str]) -> None:
        self.boxes = dict(boxes)

    def ground(self, image: torch.Tensor, prompt: str, scene_id: Optional[str]) -> str:
        match = re.search(r'for: "(.+?)"', prompt)
        if match is None:
            raise KeyError(f"oracle grounder got an unexpected prompt: {prompt!r}")
        key = (scene_id, match.group(1))
        if key not in self.boxes:
            raise KeyError(f"oracle grounder has no box for {key!r}")
        return self.boxes[key]

    @classmethod
    def from_dataset(cls, data_root: str, samples: Sequence) -> "OracleGrounder":
        """Build boxes from stored scene geometry and sample target names."""
        specs = {spec.scene_id: spec for spec in load_scene_specs(data_root)}
        boxes: Dict[Tuple[str, str], str] = {}
        for sample in samples:
            spec = specs[sample.scene_id]
            target = sample.target_name
            if " of the " in target:
                part, object_name = target.split(" of the ", 1)
            else:
                part, object_name = None, target
            matches = [o for o in spec.objects if f"{o.color} {o.shape}" == object_name]
            if len(matches) != 1:
                raise ValueError(f"scene {sample.scene_id}: target {target!r} matched {len(matches)} objects")
            with Image.open(sample.image_path) as img:
                size = img.height
            mask = render_object_mask(matches[0], size, part=part)
            rows, cols = np.nonzero(mask)
            if rows.size == 0:
                raise ValueError(f"scene {sample.scene_id}: empty mask for {target!r}")
            boxes[(sample.scene_id, sample.instruction)] = (
                f"{cols.min()},{rows.min()},{cols.max()},{rows.max()}"
            )
        return cls(boxes)


class ScriptedGrounder:
    """Plays back a fixed list of responses; for offline tests."""

    def __init__(self, responses: Sequence[str]) -> None:
        self.responses = list(responses)
        self.calls: List[str] = []

    def ground(self, image: torch.Tensor, prompt: str, scene_id: Optional[str]) -> str:
        self.calls.append(prompt)
        if not self.responses:
            raise RuntimeError("scripted grounder ran out of responses")
        return self.responses.pop(0)


class HttpGrounder:
    """Thin HTTP adapter: POSTs prompt + base64 PNG, reads {"text": ...}.

    Credential comes from the environment only (same variable as the
    instruction-generation client); requests time out rather than hang.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, session=None) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def ground(self, image: torch.Tensor, prompt: str, scene_id: Optional[str]) -> str:
        headers = {}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        array = (image[:3].clamp(0.0, 1.0) * 255.0).to(torch.uint8).permute(1, 2, 0).numpy()
        buffer = io.BytesIO()
        Image.fromarray(array).save(buffer, format="PNG")
        payload = {
            "prompt": prompt,
            "image_png_base64": base64.b64encode(buffer.getvalue()).decode("ascii"),
        }
        response = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        response.raise_for_status()
        return response.json()["text"]


# ---- the modular grounder + detector pipeline ----


@dataclass(frozen=True)
class PixelBox:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1


def parse_box(text: str) -> Optional[Tuple[float, float, float, float]]:
    match = BOX_PATTERN.search(text)
    if match is None:
        return None
    return tuple(float(g) for g in match.groups())


def map_pose_from_crop(pose: GraspPose2D, box: PixelBox, det_size: Tuple[int, int]) -> GraspPose2D:
    """Map a detector-space pose back to full-image coordinates.

    The crop-to-detector resize is anisotropic in general, so the opening
    direction is transformed as a vector: the angle follows atan2 of the
    scaled direction and the width picks up that direction's scale factor.
    Pixel centers follow the align_corners=False convention of the resize.
    """
    det_h, det_w = det_size
    sx = box.width / det_w
    sy = box.height / det_h
    x = box.x0 + (pose.x + 0.5) * sx - 0.5
    y = box.y0 + (pose.y + 0.5) * sy - 0.5
    dx, dy = math.cos(pose.theta), math.sin(pose.theta)
    theta = canonical_angle(math.atan2(sy * dy, sx * dx))
    width = pose.width * math.hypot(sx * dx, sy * dy)
    return GraspPose2D(x=x, y=y, theta=theta, width=width, quality=pose.quality)


class ModularPipeline:
    """Ground a box from language, then detect grasps inside the crop."""

    def __init__(
        self,
        grounder: Grounder,
        detector: UnconditionedDetector,
        width_max: float,
        min_peak_dist: float = 8.0,
        smoothing_sigma: float = 2.0,
    ) -> None:
        self.grounder = grounder
        self.detector = detector
        self.width_max = width_max
        self.min_peak_dist = min_peak_dist
        self.smoothing_sigma = smoothing_sigma
        self.response_log: List[dict] = []

    def _resolve_box(self, image: torch.Tensor, instruction: str, scene_id: Optional[str]) -> PixelBox:
        height, width = image.shape[1], image.shape[2]
        prompt = GROUND_PROMPT.format(instruction=instruction)
        parsed = None
        for attempt, full_prompt in enumerate((prompt, prompt + RETRY_SUFFIX)):
            text = self.grounder.ground(image, full_prompt, scene_id)
            self.response_log.append(
                {"scene_id": scene_id, "attempt": attempt, "prompt": full_prompt, "response": text}
            )
            parsed = parse_box(text)
            if parsed is not None:
                break
        if parsed is None:
            raise GroundingFailure(f"no parseable box for scene {scene_id!r} after retry")
        x0, y0, x1, y1 = parsed
        if x0 < 0 or y0 < 0 or x1 > width - 1 or y1 > height - 1:
            warnings.warn(f"box ({x0},{y0},{x1},{y1}) outside {height}x{width} image, clipping")
        xi0 = max(int(math.floor(min(x0, x1))), 0)
        yi0 = max(int(math.floor(min(y0, y1))), 0)
        xi1 = min(int(math.ceil(max(x0, x1))), width - 1)
        yi1 = min(int(math.ceil(max(y0, y1))), height - 1)
        if xi1 <= xi0 or yi1 <= yi0:
            raise GroundingFailure(f"degenerate box ({x0},{y0},{x1},{y1}) for scene {scene_id!r}")
        return PixelBox(xi0, yi0, xi1, yi1)

    def predict(
        self,
        image: torch.Tensor,
        instruction: str,
        scene_id: Optional[str] = None,
        k: int = 1,
    ) -> List[GraspPose2D]:
        """Full-image grasp poses for one instruction; raises GroundingFailure."""
        if image.dim() != 3:
            raise ValueError(f"expected a single (C, H, W) image, got {tuple(image.shape)}")
        box = self._resolve_box(image, instruction, scene_id)
        crop = image[:, box.y0 : box.y1 + 1, box.x0 : box.x1 + 1]
        det_size = self.detector.head.config.input_size
        resized = F.interpolate(
            crop.unsqueeze(0), size=det_size, mode="bilinear", align_corners=False
        ).squeeze(0)
        maps = self.detector.predict_maps(resized)
        poses = decode_grasps(
            maps,
            k=k,
            width_max=self.width_max,
            min_peak_dist=self.min_peak_dist,
            smoothing_sigma=self.smoothing_sigma,
        )
        return [map_pose_from_crop(pose, box, det_size) for pose in poses]


# ---- grasp-only training for the baseline detectors ----


def train_grasp_only(
    module: nn.Module,
    forward_fn,
    items: Sequence,
    config,
    log_path: Optional[str] = None,
) -> List[dict]:
    """Shared grasp-loss-only loop for baselines (seeded, cosine schedule).

    ``forward_fn(batch_items) -> (4-map tensor batch, gt tensor batch)``.
    """
    from .training import build_plan

    if not items:
        raise ValueError("training needs at least one grasp sample")
    torch.manual_seed(config.seed)
    plans = build_plan(config, len(items), 0)
    total_steps = sum(len(plan) for plan in plans)
    optimizer = torch.optim.Adam(module.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
    metrics: List[dict] = []
    module.train()
    step = 0
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch, plan in enumerate(plans, start=1):
            for _, indices in plan:
                optimizer.zero_grad(set_to_none=True)
                pred, gt = forward_fn([items[i] for i in indices])
                loss = grasp_loss(pred, gt)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"non-finite baseline loss at step {step}")
                loss.backward()
                lr_now = optimizer.param_groups[0]["lr"]
                optimizer.step()
                scheduler.step()
                record = {"step": step, "epoch": epoch, "l_grasp": float(loss.detach()), "lr": lr_now}
                metrics.append(record)
                if log:
                    log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
    finally:
        if log:
            log.close()
    return metrics


def _gt_batch(items: Sequence, size: Tuple[int, int], width_max: float) -> torch.Tensor:
    return torch.stack([maps_to_tensor(rasterize_gt_maps(item.gt_rects, size, width_max)) for item in items])


def train_clip_baseline(model: ClipStyleModel, items: Sequence, config, log_path: Optional[str] = None) -> List[dict]:
    size = model.head.config.input_size

    def forward_fn(batch):
        ids = model.encode_instructions([item.instruction for item in batch])
        images = torch.stack([item.head_image for item in batch])
        return model(images, ids), _gt_batch(batch, size, config.width_max)

    return train_grasp_only(model, forward_fn, items, config, log_path)


def train_unconditioned(detector: UnconditionedDetector, items: Sequence, config, log_path: Optional[str] = None) -> List[dict]:
    size = detector.head.config.input_size

    def forward_fn(batch):
        images = torch.stack([item.head_image for item in batch])
        return detector(images), _gt_batch(batch, size, config.width_max)

    return train_grasp_only(detector, forward_fn, items, config, log_path)


# ---- checkpoints ----


def save_clip_baseline(directory: str, model: ClipStyleModel, extra: Optional[dict] = None) -> None:
    config = {
        "text_dim": model.text_dim,
        "head": _head_entries(model.head.config),
        "extra": extra or {},
    }
    save_module_checkpoint(directory, model, kind=CLIP_KIND, config=config)
    model.vocab.save(os.path.join(directory, "vocab.txt"))


def load_clip_baseline(directory: str) -> Tuple[ClipStyleModel, dict]:
    config, state = read_module_checkpoint(directory, kind=CLIP_KIND)
    vocab = Vocab.load(os.path.join(directory, "vocab.txt"))
    head_kwargs = dict(config["head"])
    head_kwargs["input_size"] = tuple(head_kwargs["input_size"])
    model = ClipStyleModel(vocab, GraspHeadConfig(**head_kwargs), text_dim=config["text_dim"])
    model.load_state_dict(state, strict=True)
    return model, config.get("extra", {})


def save_unconditioned(directory: str, detector: UnconditionedDetector, extra: Optional[dict] = None) -> None:
    config = {"head": _head_entries(detector.head.config), "extra": extra or {}}
    save_module_checkpoint(directory, detector, kind=DETECTOR_KIND, config=config)


def load_unconditioned(directory: str) -> Tuple[UnconditionedDetector, dict]:
    config, state = read_module_checkpoint(directory, kind=DETECTOR_KIND)
    head_kwargs = dict(config["head"])
    head_kwargs["input_size"] = tuple(head_kwargs["input_size"])
    detector = UnconditionedDetector(GraspHeadConfig(**head_kwargs))
    detector.load_state_dict(state, strict=True)
    return detector, config.get("extra", {})


def _head_entries(config: GraspHeadConfig) -> dict:
    return {
        "in_channels": config.in_channels,
        "base_channels": config.base_channels,
        "residual_blocks": config.residual_blocks,
        "fusion_dim": config.fusion_dim,
        "input_size": list(config.input_size),
    }
