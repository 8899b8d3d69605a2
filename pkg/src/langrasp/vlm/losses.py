"""Auto-regressive text loss over response positions."""

import torch
import torch.nn.functional as F

IGNORE_INDEX = -100


def text_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not IGNORE_INDEX.

    logits: (..., seq, vocab); labels: (..., seq) with prompt, padding, and
    vision positions set to IGNORE_INDEX.
    """
    if logits.shape[:-1] != labels.shape:
        raise ValueError(
            f"logits {tuple(logits.shape)} do not align with labels {tuple(labels.shape)}"
        )
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_labels = labels.reshape(-1)
    if not (flat_labels != IGNORE_INDEX).any():
        raise ValueError("text_loss needs at least one unmasked label position")
    return F.cross_entropy(flat_logits, flat_labels, ignore_index=IGNORE_INDEX)
