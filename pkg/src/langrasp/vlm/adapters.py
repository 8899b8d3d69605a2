"""Additive low-rank adaptation of the backbone's linear layers.

apply_adapters wraps every nn.Linear (attention, MLP, the vision projection,
and the LM head) with a frozen base plus a rank-r bypass whose second factor
starts at zero, so the wrapped model computes exactly the original function
until training moves the adapters. freeze_adapters later freezes the whole
backbone, adapters included.
"""

import math

import torch
from torch import nn


class LowRankAdapterLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank <= 0:
            raise ValueError(f"rank must be > 0, got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)
        self.scaling = alpha / rank

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.up(self.down(x)) * self.scaling


def _wrap_linears(module: nn.Module, rank: int, alpha: float) -> int:
    wrapped = 0
    for name, child in module.named_children():
        if isinstance(child, LowRankAdapterLinear):
            continue
        if isinstance(child, nn.Linear):
            setattr(module, name, LowRankAdapterLinear(child, rank, alpha))
            wrapped += 1
        else:
            wrapped += _wrap_linears(child, rank, alpha)
    return wrapped


def apply_adapters(backbone: nn.Module, rank: int = None, alpha: float = None) -> int:
    """Wrap every linear layer in the backbone; returns the number wrapped.

    rank/alpha default to the backbone config's adapter settings.
    """
    if getattr(backbone, "adapters_applied", False):
        raise RuntimeError("adapters already applied to this backbone")
    config = getattr(backbone, "config", None)
    if rank is None:
        rank = config.adapter_rank if config is not None else 64
    if alpha is None:
        alpha = config.adapter_alpha if config is not None else rank
    wrapped = _wrap_linears(backbone, rank, alpha)
    if wrapped == 0:
        raise ValueError("backbone contains no linear layers to adapt")
    backbone.adapters_applied = True
    return wrapped


def freeze_adapters(backbone: nn.Module) -> None:
    """Freeze the full backbone (base weights, adapters, embeddings, norms)."""
    if not getattr(backbone, "adapters_applied", False):
        raise RuntimeError("freeze_adapters called before apply_adapters")
    for p in backbone.parameters():
        p.requires_grad_(False)
    backbone.adapters_frozen = True


def adapter_parameter_counts(backbone: nn.Module):
    """(trainable adapter parameters, total backbone parameters)."""
    adapter = 0
    for module in backbone.modules():
        if isinstance(module, LowRankAdapterLinear):
            adapter += module.down.weight.numel() + module.up.weight.numel()
    total = sum(p.numel() for p in backbone.parameters())
    return adapter, total
