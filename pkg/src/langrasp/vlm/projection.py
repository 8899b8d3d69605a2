"""Projection network mapping h_avg to the fusion feature f."""

import torch
import torch.nn.functional as F
from torch import nn

_ACTIVATIONS = {
    "gelu": F.gelu,
    "relu": F.relu,
    "identity": lambda x: x,
}


class FusionProjector(nn.Module):
    """Two-layer perceptron: hidden_dim -> fusion_dim -> fusion_dim."""

    def __init__(self, hidden_dim: int, fusion_dim: int, activation: str = "gelu"):
        super().__init__()
        if hidden_dim <= 0 or fusion_dim <= 0:
            raise ValueError("hidden_dim and fusion_dim must be > 0")
        if activation not in _ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {sorted(_ACTIVATIONS)}, got {activation!r}"
            )
        self.hidden_dim = hidden_dim
        self.fusion_dim = fusion_dim
        self.activation = activation
        self.fc1 = nn.Linear(hidden_dim, fusion_dim)
        self.fc2 = nn.Linear(fusion_dim, fusion_dim)

    def forward(self, h_avg: torch.Tensor) -> torch.Tensor:
        if h_avg.shape[-1] != self.hidden_dim:
            raise ValueError(
                f"h_avg has dim {h_avg.shape[-1]}, projector expects {self.hidden_dim}"
            )
        return self.fc2(_ACTIVATIONS[self.activation](self.fc1(h_avg)))
