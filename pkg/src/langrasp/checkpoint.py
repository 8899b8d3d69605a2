"""Directory-based checkpoints: plain-text config + one .npy blob per tensor.

Layout:

    checkpoint/
      config.txt            # "key = <json value>" lines
      vocab.txt             # one token per line, specials first
      tensors/<name>.npy    # state_dict entry per file, dotted module path

Everything is human-inspectable; no pickled objects. The tensors directory
holds parameters and buffers alike (batch-norm running stats included), so a
load restores bit-identical forward behavior.
"""

from __future__ import annotations

import json
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .grasp_head import GraspHeadConfig
from .model import InstructionGraspModel
from .vlm import BackboneConfig, apply_adapters, freeze_adapters
from .vocab import Vocab

MODEL_KIND = "instruction_grasp"


def write_config(path: str, entries: Dict[str, Any]) -> None:
    """Write "key = <json>" lines; keys must be bare words."""
    lines = []
    for key, value in entries.items():
        if not key or any(ch.isspace() for ch in key):
            raise ValueError(f"bad config key {key!r}")
        lines.append(f"{key} = {json.dumps(value, sort_keys=True)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path: str) -> Dict[str, Any]:
    entries: Dict[str, Any] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if " = " not in line:
                raise ValueError(f"{os.path.basename(path)} line {lineno}: expected 'key = value'")
            key, _, value = line.partition(" = ")
            try:
                entries[key.strip()] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{os.path.basename(path)} line {lineno}: bad value ({exc})") from None
    return entries


def save_tensors(directory: str, state: Dict[str, torch.Tensor]) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, tensor in state.items():
        np.save(os.path.join(directory, f"{name}.npy"), tensor.detach().cpu().numpy())


def load_tensors(directory: str) -> Dict[str, torch.Tensor]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"missing tensors directory: {directory}")
    state: Dict[str, torch.Tensor] = {}
    for fname in sorted(os.listdir(directory)):
        if not fname.endswith(".npy"):
            continue
        arr = np.load(os.path.join(directory, fname))
        state[fname[: -len(".npy")]] = torch.from_numpy(arr)
    if not state:
        raise ValueError(f"no tensors found in {directory}")
    return state


def save_model_checkpoint(
    directory: str,
    model: InstructionGraspModel,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """Persist the bundled model; ``extra`` rides along for run metadata."""
    os.makedirs(directory, exist_ok=True)
    backbone = model.backbone
    entries = {
        "format_version": 1,
        "model_kind": MODEL_KIND,
        "vocab_size": len(model.vocab),
        "backbone": _dataclass_entries(backbone.config),
        "head": _dataclass_entries(model.head.config),
        "projector_activation": model.projector_activation,
        "adapters_applied": bool(getattr(backbone, "adapters_applied", False)),
        "adapters_frozen": bool(getattr(backbone, "adapters_frozen", False)),
        "extra": extra or {},
    }
    write_config(os.path.join(directory, "config.txt"), entries)
    model.vocab.save(os.path.join(directory, "vocab.txt"))
    save_tensors(os.path.join(directory, "tensors"), dict(model.state_dict()))


def load_model_checkpoint(directory: str) -> Tuple[InstructionGraspModel, Dict[str, Any]]:
    """Rebuild the model from a checkpoint directory; returns (model, extra)."""
    config_path = os.path.join(directory, "config.txt")
    if not os.path.isfile(config_path):
        raise FileNotFoundError(f"missing checkpoint config: {config_path}")
    entries = read_config(config_path)
    kind = entries.get("model_kind")
    if kind != MODEL_KIND:
        raise ValueError(f"checkpoint at {directory} holds {kind!r}, expected {MODEL_KIND!r}")
    vocab = Vocab.load(os.path.join(directory, "vocab.txt"))
    if len(vocab) != entries["vocab_size"]:
        raise ValueError(f"vocab.txt has {len(vocab)} tokens, config says {entries['vocab_size']}")
    head_kwargs = dict(entries["head"])
    head_kwargs["input_size"] = tuple(head_kwargs["input_size"])
    model = InstructionGraspModel(
        vocab=vocab,
        backbone_config=BackboneConfig(**entries["backbone"]),
        head_config=GraspHeadConfig(**head_kwargs),
        projector_activation=entries["projector_activation"],
    )
    if entries["adapters_applied"]:
        apply_adapters(model.backbone)
    state = load_tensors(os.path.join(directory, "tensors"))
    model.load_state_dict(state, strict=True)
    if entries.get("adapters_frozen"):
        freeze_adapters(model.backbone)
    return model, entries.get("extra", {})


def save_module_checkpoint(directory: str, module: nn.Module, kind: str, config: Dict[str, Any]) -> None:
    """Generic save for single-module models (baselines share the layout)."""
    os.makedirs(directory, exist_ok=True)
    entries = {"format_version": 1, "model_kind": kind, "config": config}
    write_config(os.path.join(directory, "config.txt"), entries)
    save_tensors(os.path.join(directory, "tensors"), dict(module.state_dict()))


def read_module_checkpoint(directory: str, kind: str) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    config_path = os.path.join(directory, "config.txt")
    if not os.path.isfile(config_path):
        raise FileNotFoundError(f"missing checkpoint config: {config_path}")
    entries = read_config(config_path)
    found = entries.get("model_kind")
    if found != kind:
        raise ValueError(f"checkpoint at {directory} holds {found!r}, expected {kind!r}")
    return entries["config"], load_tensors(os.path.join(directory, "tensors"))


def _dataclass_entries(config: Any) -> Dict[str, Any]:
    fields = {}
    for name in config.__dataclass_fields__:
        value = getattr(config, name)
        fields[name] = list(value) if isinstance(value, tuple) else value
    return fields
