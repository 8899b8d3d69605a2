"""Manifest loading and the deterministic scene-level train/test split.

The split is scene-level so no image appears in both splits: scenes are
ordered by the md5 of their id and the first round(fraction * n) become the
train split. This is stable across runs, machines, and insertion order.
"""

import hashlib
import json
import os
from typing import Iterator, List, Sequence, Set, Tuple

from langrasp.geometry import load_rects
from langrasp.data.types import GenericSample, InstructionSample

SPLITS = ("train", "test")

_REQUIRED_FIELDS = (
    "scene_id", "image", "rects", "instruction",
    "target_name", "target_level", "instruction_kind",
)


def split_scenes(
    scene_ids: Sequence[str], fraction: float = 0.9
) -> Tuple[Set[str], Set[str]]:
    """Partition scene ids into (train, test) sets, exactly round(fraction*n)
    scenes in train, ordered by md5 of the id."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    unique = sorted(set(scene_ids))
    ranked = sorted(unique, key=lambda s: (hashlib.md5(s.encode("utf-8")).hexdigest(), s))
    n_train = int(fraction * len(ranked) + 0.5)
    return set(ranked[:n_train]), set(ranked[n_train:])


def _parse_jsonl(path: str) -> List[dict]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing manifest file: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{os.path.basename(path)} line {lineno}: {err}") from err
            if not isinstance(rec, dict):
                raise ValueError(
                    f"{os.path.basename(path)} line {lineno}: expected an object"
                )
            rec["_lineno"] = lineno
            records.append(rec)
    return records


def load_samples(
    root: str, split: str, split_fraction: float = 0.9
) -> Iterator[InstructionSample]:
    """Stream validated InstructionSamples for one side of the scene split."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    records = _parse_jsonl(os.path.join(root, "manifest.jsonl"))
    for rec in records:
        missing = [k for k in _REQUIRED_FIELDS if k not in rec]
        if missing:
            raise ValueError(
                f"manifest.jsonl line {rec['_lineno']}: missing fields {missing}"
            )
    train, test = split_scenes([rec["scene_id"] for rec in records], split_fraction)
    keep = train if split == "train" else test
    for rec in records:
        if rec["scene_id"] not in keep:
            continue
        image_path = os.path.join(root, rec["image"])
        if not os.path.isfile(image_path):
            raise FileNotFoundError(f"missing image file: {image_path}")
        depth_path = None
        if rec.get("depth"):
            depth_path = os.path.join(root, rec["depth"])
            if not os.path.isfile(depth_path):
                raise FileNotFoundError(f"missing depth file: {depth_path}")
        try:
            yield InstructionSample(
                scene_id=rec["scene_id"],
                image_path=image_path,
                instruction=rec["instruction"],
                target_name=rec["target_name"],
                target_level=rec["target_level"],
                instruction_kind=rec["instruction_kind"],
                gt_rects=load_rects(os.path.join(root, rec["rects"])),
                depth_path=depth_path,
            )
        except ValueError as err:
            raise ValueError(f"manifest.jsonl line {rec['_lineno']}: {err}") from err


def load_generic(root: str) -> List[GenericSample]:
    """Read generic.jsonl into GenericSample records (empty if absent)."""
    path = os.path.join(root, "generic.jsonl")
    if not os.path.isfile(path):
        return []
    out = []
    for rec in _parse_jsonl(path):
        try:
            out.append(GenericSample(
                scene_id=rec["scene_id"],
                image_path=os.path.join(root, rec["image"]),
                instruction=rec["instruction"],
                response=rec["response"],
            ))
        except (KeyError, ValueError) as err:
            raise ValueError(f"generic.jsonl line {rec['_lineno']}: {err}") from err
    return out
