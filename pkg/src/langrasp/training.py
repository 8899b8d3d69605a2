"""Combined-objective training with the two-phase freeze schedule.

The total loss is lambda_text * L_text + lambda_grasp * L_grasp. Epochs
before ``freeze_epoch`` train on a seeded mixture of grasp samples and
generic instruction-following samples with both terms active; from
``freeze_epoch`` on, lambda_text drops to 0, the adapter-bearing backbone is
frozen, and training proceeds on grasp samples alone. Target spans are
teacher-forced from labels in every phase so the grasp loss always has a
fusion feature to flow through.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from .checkpoint import save_model_checkpoint
from .data import GenericSample, InstructionSample
from .data.manifest import load_generic, load_samples
from .geometry import rasterize_gt_maps
from .grasp_head import grasp_loss, maps_to_tensor, prepare_image
from .model import InstructionGraspModel, SampleEncoding
from .vlm import freeze_adapters
from .vlm.losses import text_loss


@dataclass(frozen=True)
class TrainConfig:
    lambda_text: float = 1.0
    lambda_grasp: float = 1.0
    freeze_epoch: int = 3
    batch_size: int = 8
    lr: float = 5e-4
    epochs: int = 10
    mix: float = 1.0 / 3.0
    seed: int = 0
    width_max: float = 150.0

    def __post_init__(self) -> None:
        if self.lambda_text < 0.0 or self.lambda_grasp < 0.0:
            raise ValueError("loss weights must be >= 0")
        if self.freeze_epoch < 1:
            raise ValueError("freeze_epoch must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.mix < 1.0:
            raise ValueError("mix must lie in [0, 1)")
        if self.width_max <= 0.0:
            raise ValueError("width_max must be > 0")


def combined_loss(
    l_text: Union[torch.Tensor, float],
    l_grasp: Union[torch.Tensor, float],
    config: TrainConfig,
) -> torch.Tensor:
    """lambda_text * l_text + lambda_grasp * l_grasp."""
    l_text = torch.as_tensor(l_text, dtype=torch.get_default_dtype()) if not torch.is_tensor(l_text) else l_text
    l_grasp = torch.as_tensor(l_grasp, dtype=l_text.dtype) if not torch.is_tensor(l_grasp) else l_grasp
    if not bool(torch.isfinite(l_text)) or not bool(torch.isfinite(l_grasp)):
        raise ValueError("loss terms must be finite")
    if float(l_text.detach()) < 0.0 or float(l_grasp.detach()) < 0.0:
        raise ValueError("loss terms must be non-negative")
    return config.lambda_text * l_text + config.lambda_grasp * l_grasp


@dataclass(frozen=True)
class GraspItem:
    encoding: SampleEncoding
    instruction: str
    image: torch.Tensor
    head_image: torch.Tensor
    gt_rects: tuple
    sample_id: str


@dataclass(frozen=True)
class GenericItem:
    encoding: SampleEncoding
    image: torch.Tensor
    sample_id: str


@dataclass
class TrainDatasets:
    grasp: List[GraspItem]
    generic: List[GenericItem]


class ImageCache:
    """Prepared-tensor cache keyed by path so samples of a scene share memory."""

    def __init__(self) -> None:
        self._store: Dict[Tuple[str, Optional[str]], torch.Tensor] = {}

    def get(self, image_path: str, depth_path: Optional[str] = None) -> torch.Tensor:
        key = (image_path, depth_path)
        if key not in self._store:
            rgb = np.asarray(Image.open(image_path).convert("RGB"))
            depth = None
            if depth_path is not None:
                depth = np.asarray(Image.open(depth_path), dtype=np.float32)
            self._store[key] = prepare_image(rgb, depth)
        return self._store[key]


def prepare_grasp_item(
    model: InstructionGraspModel,
    sample: InstructionSample,
    cache: Optional[ImageCache] = None,
) -> GraspItem:
    cache = cache or ImageCache()
    image = cache.get(sample.image_path)
    _check_image(model, image, sample.image_path)
    if model.head.config.in_channels == 4:
        if sample.depth_path is None:
            raise ValueError(f"sample {sample.scene_id}: head wants depth but sample has none")
        head_image = cache.get(sample.image_path, sample.depth_path)
    else:
        head_image = image
    height, width = model.head.config.input_size
    for index, rect in enumerate(sample.gt_rects):
        xs, ys = rect.corners[:, 0], rect.corners[:, 1]
        if xs.min() < 0.0 or xs.max() > width - 1.0 or ys.min() < 0.0 or ys.max() > height - 1.0:
            raise ValueError(f"sample {sample.scene_id}: gt rectangle {index} extends outside the image")
    encoding = model.encode_sample(sample.instruction, target_name=sample.target_name)
    return GraspItem(
        encoding=encoding,
        instruction=sample.instruction,
        image=image,
        head_image=head_image,
        gt_rects=tuple(sample.gt_rects),
        sample_id=f"{sample.scene_id}:{sample.target_name}",
    )


def prepare_generic_item(
    model: InstructionGraspModel,
    sample: GenericSample,
    cache: Optional[ImageCache] = None,
) -> GenericItem:
    cache = cache or ImageCache()
    image = cache.get(sample.image_path)
    _check_image(model, image, sample.image_path)
    encoding = model.encode_sample(sample.instruction, target_name=None, response=sample.response)
    return GenericItem(encoding=encoding, image=image, sample_id=sample.scene_id)


def load_training_data(
    model: InstructionGraspModel,
    data_root: str,
    split: str = "train",
    split_fraction: float = 0.9,
) -> TrainDatasets:
    """Load and tensorize the manifest's samples for one split."""
    cache = ImageCache()
    grasp = [
        prepare_grasp_item(model, sample, cache)
        for sample in load_samples(data_root, split, split_fraction=split_fraction)
    ]
    generic = [prepare_generic_item(model, sample, cache) for sample in load_generic(data_root)]
    return TrainDatasets(grasp=grasp, generic=generic)


def _check_image(model: InstructionGraspModel, image: torch.Tensor, path: str) -> None:
    size = model.backbone.config.image_size
    if image.shape[1:] != (size, size):
        raise ValueError(f"image {path} is {tuple(image.shape[1:])}, model wants {size}x{size}")


def _batch_fingerprint(ids: torch.Tensor, images: torch.Tensor) -> str:
    digest = hashlib.sha256()
    digest.update(ids.numpy().tobytes())
    digest.update(images.numpy().tobytes())
    return digest.hexdigest()[:16]


def build_plan(
    config: TrainConfig,
    n_grasp: int,
    n_generic: int,
) -> List[List[Tuple[str, Tuple[int, ...]]]]:
    """Per-epoch batch plans: ("grasp"|"generic", sample indices) entries.

    Each epoch covers every grasp sample once in a seeded shuffle; phase-1
    epochs interleave generic batches at mix:(1-mix) of the batch count.
    The whole schedule is a pure function of (config, dataset sizes).
    """
    if n_grasp < 1:
        raise ValueError("training needs at least one grasp sample")
    rng = np.random.default_rng(config.seed)
    plans = []
    generic_cursor = 0
    generic_order: List[int] = []
    for epoch in range(1, config.epochs + 1):
        grasp_order = rng.permutation(n_grasp)
        batches: List[Tuple[str, Tuple[int, ...]]] = [
            ("grasp", tuple(int(i) for i in grasp_order[pos : pos + config.batch_size]))
            for pos in range(0, n_grasp, config.batch_size)
        ]
        phase1 = epoch < config.freeze_epoch
        if phase1 and config.mix > 0.0 and n_generic > 0:
            n_gen_batches = int(round(len(batches) * config.mix / (1.0 - config.mix)))
            for _ in range(n_gen_batches):
                batch = []
                for _ in range(min(config.batch_size, n_generic)):
                    if generic_cursor >= len(generic_order):
                        generic_order = [int(i) for i in rng.permutation(n_generic)]
                        generic_cursor = 0
                    batch.append(generic_order[generic_cursor])
                    generic_cursor += 1
                batches.append(("generic", tuple(batch)))
            order = rng.permutation(len(batches))
            batches = [batches[int(i)] for i in order]
        plans.append(batches)
    return plans


@dataclass
class TrainResult:
    metrics: List[dict]
    checkpoint_dirs: List[str]
    final_dir: str
    steps: int


def grasp_batch_losses(
    model: InstructionGraspModel,
    items: Sequence[GraspItem],
    width_max: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Forward one grasp batch; returns (l_text, l_grasp, ids, images)."""
    ids, labels, spans = model.collate([item.encoding for item in items])
    images = torch.stack([item.image for item in items])
    head_images = torch.stack([item.head_image for item in items])
    logits, hidden = model.backbone(images, ids)
    l_text = text_loss(logits, labels)
    fusion = model.fuse(hidden, spans)
    maps = model.head(head_images, fusion)
    size = model.head.config.input_size
    gt = torch.stack(
        [maps_to_tensor(rasterize_gt_maps(item.gt_rects, size, width_max)) for item in items]
    )
    l_grasp = grasp_loss(maps, gt)
    return l_text, l_grasp, ids, images


def generic_batch_losses(
    model: InstructionGraspModel,
    items: Sequence[GenericItem],
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    ids, labels, _ = model.collate([item.encoding for item in items])
    images = torch.stack([item.image for item in items])
    logits, _ = model.backbone(images, ids)
    return text_loss(logits, labels), ids, images


def train(
    model: InstructionGraspModel,
    datasets: TrainDatasets,
    config: TrainConfig,
    out_dir: str,
) -> TrainResult:
    """Run the full two-phase schedule; writes per-epoch checkpoints.

    Outputs under ``out_dir``: epoch_XXX/ checkpoint directories, final/ (a
    copy of the last epoch), and metrics.jsonl with one record per step.
    """
    if not getattr(model.backbone, "adapters_applied", False):
        raise RuntimeError("train expects apply_adapters to have been called on the backbone")
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    plans = build_plan(config, len(datasets.grasp), len(datasets.generic))
    total_steps = sum(len(plan) for plan in plans)
    optimizer = torch.optim.Adam((p for p in model.parameters() if p.requires_grad), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
    phase2_config = dataclasses.replace(config, lambda_text=0.0)

    metrics: List[dict] = []
    checkpoint_dirs: List[str] = []
    step = 0
    model.train()
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as log:
        for epoch, plan in enumerate(plans, start=1):
            phase2 = epoch >= config.freeze_epoch
            if phase2 and not getattr(model.backbone, "adapters_frozen", False):
                freeze_adapters(model.backbone)
            effective = phase2_config if phase2 else config
            for source, indices in plan:
                optimizer.zero_grad(set_to_none=True)
                if source == "grasp":
                    items = [datasets.grasp[i] for i in indices]
                    l_text, l_grasp, ids, images = grasp_batch_losses(model, items, config.width_max)
                else:
                    items = [datasets.generic[i] for i in indices]
                    l_text, ids, images = generic_batch_losses(model, items)
                    l_grasp = l_text.new_zeros(())
                if not torch.isfinite(l_text) or not torch.isfinite(l_grasp):
                    raise RuntimeError(
                        f"non-finite loss at step {step} (epoch {epoch}, {source} batch "
                        f"{_batch_fingerprint(ids, images)})"
                    )
                total = combined_loss(l_text, l_grasp, effective)
                total.backward()
                lr_now = optimizer.param_groups[0]["lr"]
                optimizer.step()
                scheduler.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "phase": 2 if phase2 else 1,
                    "source": source,
                    "l_text": float(l_text.detach()),
                    "l_grasp": float(l_grasp.detach()),
                    "total": float(total.detach()),
                    "lr": lr_now,
                }
                metrics.append(record)
                log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            log.flush()
            epoch_dir = os.path.join(out_dir, f"epoch_{epoch:03d}")
            save_model_checkpoint(
                epoch_dir,
                model,
                extra={"epoch": epoch, "width_max": config.width_max, "phase": 2 if phase2 else 1},
            )
            checkpoint_dirs.append(epoch_dir)
    final_dir = os.path.join(out_dir, "final")
    save_model_checkpoint(
        final_dir,
        model,
        extra={"epoch": config.epochs, "width_max": config.width_max, "phase": 2 if config.epochs >= config.freeze_epoch else 1},
    )
    return TrainResult(metrics=metrics, checkpoint_dirs=checkpoint_dirs, final_dir=final_dir, steps=step)
