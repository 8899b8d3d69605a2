"""Bundled instruction-to-grasp model.

Ties the three trainable pieces together: the multimodal causal LM emits a
response whose grasp target is wrapped in [SPT] markers, the last-layer
hidden vectors over that span are averaged and projected to the fusion
feature f, and the convolutional head turns image + f into grasp maps.

Prompt template (word-level, one dialogue turn):

    [IMG]*T [BOS] instruction : <instruction words> target :
    -> [SPT] <target words> [SPT] [EOS]

During training the span comes from the teacher-forced labels so the grasp
loss has a target embedding at every step; at inference the span is parsed
from the generated response, and a failed parse falls back to f = 0 so the
grasp head still produces maps (the failure is reported, not raised).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .grasp_head import GraspHead, GraspHeadConfig
from .geometry import GraspMaps
from .vlm import (
    BackboneConfig,
    EmptyTargetError,
    FusionProjector,
    MissingTargetError,
    MultimodalBackbone,
    TargetSpan,
    extract_target_span,
    target_embedding,
)
from .vlm.losses import IGNORE_INDEX
from .vocab import BOS_ID, EOS_ID, PAD_ID, SPT_ID, Vocab


@dataclass(frozen=True)
class SampleEncoding:
    """Token-level view of one teacher-forced training sample.

    ``ids`` is the text-only sequence (vision slots are implicit); ``span``
    indexes into ``ids`` and is None for generic samples without a target.
    """

    ids: Tuple[int, ...]
    response_start: int
    span: Optional[TargetSpan]


@dataclass
class InferenceResult:
    instruction: str
    response_ids: Tuple[int, ...]
    response_text: str
    target_name: Optional[str]
    multi_pair: bool
    failure: Optional[str]
    fusion: torch.Tensor
    maps: GraspMaps


class InstructionGraspModel(nn.Module):
    """Backbone + fusion projector + grasp head with shared bookkeeping."""

    def __init__(
        self,
        vocab: Vocab,
        backbone_config: BackboneConfig,
        head_config: GraspHeadConfig,
        projector_activation: str = "gelu",
    ) -> None:
        super().__init__()
        size = backbone_config.image_size
        if head_config.input_size != (size, size):
            raise ValueError(
                f"head input_size {head_config.input_size} != backbone image size {size}x{size}"
            )
        self.vocab = vocab
        self.projector_activation = projector_activation
        self.backbone = MultimodalBackbone(backbone_config, len(vocab))
        self.projector = FusionProjector(
            backbone_config.hidden_dim, head_config.fusion_dim, activation=projector_activation
        )
        self.head = GraspHead(head_config)

    @property
    def fusion_dim(self) -> int:
        return self.head.config.fusion_dim

    # ---- token bookkeeping ----

    def prompt_ids(self, instruction: str) -> List[int]:
        return [BOS_ID] + self.vocab.encode(f"instruction : {instruction} target :")

    def encode_sample(self, instruction: str, target_name: Optional[str], response: Optional[str] = None) -> SampleEncoding:
        """Build the teacher-forced token sequence for one sample.

        Grasp samples pass ``target_name`` and get an SPT-wrapped response;
        generic samples pass ``response`` text instead and carry no span.
        """
        prompt = self.prompt_ids(instruction)
        if (target_name is None) == (response is None):
            raise ValueError("exactly one of target_name or response must be given")
        if target_name is not None:
            target_tokens = self.vocab.encode(target_name)
            if not target_tokens:
                raise ValueError(f"target name {target_name!r} tokenizes to nothing")
            ids = prompt + [SPT_ID] + target_tokens + [SPT_ID, EOS_ID]
            span = TargetSpan(start=len(prompt) + 1, end=len(prompt) + 1 + len(target_tokens))
        else:
            answer_tokens = self.vocab.encode(response)
            if not answer_tokens:
                raise ValueError(f"response {response!r} tokenizes to nothing")
            ids = prompt + answer_tokens + [EOS_ID]
            span = None
        return SampleEncoding(ids=tuple(ids), response_start=len(prompt), span=span)

    def collate(self, encodings: Sequence[SampleEncoding]) -> Tuple[torch.Tensor, torch.Tensor, List[Optional[TargetSpan]]]:
        """Right-pad encodings into (ids, labels, spans) batch tensors.

        Labels align with the full vision+text logit sequence: position i
        holds the token at i+1 when that token is part of the response,
        IGNORE_INDEX everywhere else (vision slots, prompt, padding).
        """
        if not encodings:
            raise ValueError("collate needs at least one encoding")
        vision = self.backbone.config.vision_tokens
        text_len = max(len(enc.ids) for enc in encodings)
        ids = torch.full((len(encodings), text_len), PAD_ID, dtype=torch.long)
        labels = torch.full((len(encodings), vision + text_len), IGNORE_INDEX, dtype=torch.long)
        for row, enc in enumerate(encodings):
            ids[row, : len(enc.ids)] = torch.tensor(enc.ids, dtype=torch.long)
            for j in range(enc.response_start, len(enc.ids)):
                # logits at full-sequence position (vision + j - 1) predict text token j
                labels[row, vision + j - 1] = enc.ids[j]
        return ids, labels, [enc.span for enc in encodings]

    # ---- fusion ----

    def fuse(self, hidden: torch.Tensor, spans: Sequence[Optional[TargetSpan]]) -> torch.Tensor:
        """Project span-averaged hidden states to fusion features.

        ``hidden`` is the (B, T_v + S, H) last layer; spans index text
        positions and are shifted past the vision prefix here. A None span
        contributes a zero fusion vector.
        """
        if hidden.dim() != 3:
            raise ValueError(f"hidden must be (B, S, H), got {tuple(hidden.shape)}")
        if len(spans) != hidden.shape[0]:
            raise ValueError(f"{len(spans)} spans for batch of {hidden.shape[0]}")
        vision = self.backbone.config.vision_tokens
        rows = []
        for row, span in enumerate(spans):
            if span is None:
                rows.append(hidden.new_zeros(self.fusion_dim))
                continue
            shifted = TargetSpan(start=span.start + vision, end=span.end + vision, multi_pair=span.multi_pair)
            rows.append(self.projector(target_embedding(hidden[row], shifted)))
        return torch.stack(rows, dim=0)

    # ---- inference ----

    def infer(
        self,
        image: torch.Tensor,
        instruction: str,
        head_image: Optional[torch.Tensor] = None,
        max_new: int = 24,
    ) -> InferenceResult:
        """Generate, parse the target span, fuse, and run the grasp head.

        ``image`` is a (3, H, W) tensor in [0, 1] for the backbone;
        ``head_image`` defaults to it and may add a depth channel. Span
        parse failures set ``failure`` and fall back to a zero fusion.
        """
        if image.dim() != 3:
            raise ValueError(f"infer expects a single (C, H, W) image, got {tuple(image.shape)}")
        was_training = self.training
        self.eval()
        try:
            prompt = self.prompt_ids(instruction)
            response = self.backbone.generate(image, prompt, max_new=max_new)
            failure = None
            multi_pair = False
            target_name: Optional[str] = None
            fusion = image.new_zeros(self.fusion_dim)
            try:
                span = extract_target_span(response)
            except MissingTargetError:
                failure = "missing_target"
            except EmptyTargetError:
                failure = "empty_target"
            else:
                multi_pair = span.multi_pair
                target_name = self.vocab.decode(response[span.start : span.end])
                full_ids = torch.tensor(prompt + list(response), dtype=torch.long, device=image.device)
                with torch.no_grad():
                    _, hidden = self.backbone(image, full_ids)
                    shift = self.backbone.config.vision_tokens + len(prompt)
                    h_avg = target_embedding(
                        hidden, TargetSpan(start=span.start + shift, end=span.end + shift)
                    )
                    fusion = self.projector(h_avg)
            maps = self.head.predict_maps(head_image if head_image is not None else image, fusion)
        finally:
            self.train(was_training)
        return InferenceResult(
            instruction=instruction,
            response_ids=tuple(int(i) for i in response),
            response_text=self.vocab.decode(response, skip_specials=False),
            target_name=target_name,
            multi_pair=multi_pair,
            failure=failure,
            fusion=fusion.detach(),
            maps=maps,
        )
