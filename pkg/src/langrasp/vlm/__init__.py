"""Multimodal causal LM: vision-prefixed transformer backbone, low-rank
adapters, [SPT] span extraction, and the fusion-feature projector."""

from langrasp.vlm.backbone import BackboneConfig, MultimodalBackbone
from langrasp.vlm.adapters import (
    LowRankAdapterLinear,
    adapter_parameter_counts,
    apply_adapters,
    freeze_adapters,
)
from langrasp.vlm.spans import (
    EmptyTargetError,
    MissingTargetError,
    TargetSpan,
    extract_target_span,
    target_embedding,
)
from langrasp.vlm.projection import FusionProjector
from langrasp.vlm.losses import IGNORE_INDEX, text_loss

__all__ = [
    "BackboneConfig",
    "MultimodalBackbone",
    "LowRankAdapterLinear",
    "adapter_parameter_counts",
    "apply_adapters",
    "freeze_adapters",
    "EmptyTargetError",
    "MissingTargetError",
    "TargetSpan",
    "extract_target_span",
    "target_embedding",
    "FusionProjector",
    "IGNORE_INDEX",
    "text_loss",
]
