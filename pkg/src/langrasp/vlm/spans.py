"""[SPT]-delimited target spans and last-layer embedding averaging."""

from dataclasses import dataclass

import torch

from langrasp.vocab import SPT_ID


class MissingTargetError(ValueError):
    """The token sequence does not contain a matched [SPT] pair."""


class EmptyTargetError(ValueError):
    """A matched [SPT] pair wraps zero tokens."""


@dataclass(frozen=True)
class TargetSpan:
    """Half-open token range (start inclusive, end exclusive) between a
    matched [SPT] pair; multi_pair marks that later pairs were ignored."""

    start: int
    end: int
    multi_pair: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


def extract_target_span(ids, spt_id: int = SPT_ID) -> TargetSpan:
    """Span between the first matched [SPT] pair; later pairs set multi_pair."""
    positions = [i for i, t in enumerate(ids) if int(t) == spt_id]
    if len(positions) < 2:
        raise MissingTargetError(
            f"need a matched [SPT] pair, found {len(positions)} marker(s)"
        )
    start, end = positions[0] + 1, positions[1]
    if start == end:
        raise EmptyTargetError("matched [SPT] pair wraps no tokens")
    return TargetSpan(start=start, end=end, multi_pair=len(positions) > 2)


def target_embedding(last_layer: torch.Tensor, span: TargetSpan) -> torch.Tensor:
    """h_avg: mean of the last-layer hidden vectors over the span positions."""
    if last_layer.dim() != 2:
        raise ValueError(f"last_layer must be (seq, hidden), got {tuple(last_layer.shape)}")
    if span.end > last_layer.shape[0] or len(span) == 0:
        raise ValueError(
            f"span [{span.start}, {span.end}) out of bounds for "
            f"sequence of {last_layer.shape[0]}"
        )
    return last_layer[span.start: span.end].mean(dim=0)
