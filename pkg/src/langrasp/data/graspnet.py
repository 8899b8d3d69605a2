"""Importer for RGB-D grasp datasets with 6-DoF annotations.

No bulk data ships with the package; this module consumes a directory laid
out as below and produces a manifest.jsonl (plus rect files) in the same
root, loadable via langrasp.data.manifest:

    root/
      scenes/<scene_id>/
        rgb.png                     color image
        depth.png                   optional 16-bit depth, millimeters
        camera.json                 {"intrinsics": 3x3 row-major list}
        objects/<object_id>/
          pose.json                 {"object_pose": 4x4 object-to-camera}
          meta.json                 optional {"name": "mug"}
          parts.json                {"parts": [{"name": str,
                                                "points": [[x, y, z], ...]}]}
          grasps.json               {"grasps": [{"position": [3],
                                                 "rotation": 3x3,
                                                 "width": m,
                                                 "score": [0, 1]}]}

Grasps scoring below the confidence cutoff are dropped before part
assignment. Grasps whose projection fails (behind camera, degenerate) are
skipped with a count in the summary.
"""

import json
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from langrasp.data.parts import assign_grasps_to_parts, project_grasp_to_rect
from langrasp.data.types import CameraView, Grasp6D
from langrasp.geometry import GraspRect, save_rects


@dataclass
class ImportConfig:
    root: str
    score_cutoff: float = 0.5
    jaw_ratio: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_cutoff <= 1.0:
            raise ValueError(f"score_cutoff must be in [0, 1], got {self.score_cutoff}")


def _read_json(path: str):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing annotation file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: {err}") from err


def _load_object(obj_dir: str) -> Tuple[str, np.ndarray, List[Tuple[str, np.ndarray]], List[Grasp6D]]:
    pose = np.asarray(_read_json(os.path.join(obj_dir, "pose.json"))["object_pose"], dtype=np.float64)
    name = os.path.basename(obj_dir).replace("_", " ")
    meta_path = os.path.join(obj_dir, "meta.json")
    if os.path.isfile(meta_path):
        name = _read_json(meta_path).get("name", name)
    parts = [
        (p["name"], np.asarray(p["points"], dtype=np.float64))
        for p in _read_json(os.path.join(obj_dir, "parts.json"))["parts"]
    ]
    grasps = [
        Grasp6D(
            position=np.asarray(g["position"], dtype=np.float64),
            rotation=np.asarray(g["rotation"], dtype=np.float64),
            width=float(g["width"]),
            score=float(g.get("score", 1.0)),
        )
        for g in _read_json(os.path.join(obj_dir, "grasps.json"))["grasps"]
    ]
    return name, pose, parts, grasps


def import_graspnet_tree(config: ImportConfig) -> Dict[str, int]:
    """Convert an annotated tree into manifest.jsonl + rect files in root."""
    scenes_dir = os.path.join(config.root, "scenes")
    if not os.path.isdir(scenes_dir):
        raise FileNotFoundError(f"missing scenes directory: {scenes_dir}")
    os.makedirs(os.path.join(config.root, "rects"), exist_ok=True)
    manifest_lines: List[str] = []
    dropped_low_score = 0
    skipped_projection = 0
    for scene_id in sorted(os.listdir(scenes_dir)):
        scene_dir = os.path.join(scenes_dir, scene_id)
        if not os.path.isdir(scene_dir):
            continue
        rgb_rel = f"scenes/{scene_id}/rgb.png"
        rgb_path = os.path.join(config.root, rgb_rel)
        if not os.path.isfile(rgb_path):
            raise FileNotFoundError(f"missing image file: {rgb_path}")
        with Image.open(rgb_path) as im:
            image_size = (im.height, im.width)
        depth_rel = f"scenes/{scene_id}/depth.png"
        if not os.path.isfile(os.path.join(config.root, depth_rel)):
            depth_rel = None
        intrinsics = np.asarray(
            _read_json(os.path.join(scene_dir, "camera.json"))["intrinsics"],
            dtype=np.float64,
        )
        objects_dir = os.path.join(scene_dir, "objects")
        if not os.path.isdir(objects_dir):
            raise FileNotFoundError(f"missing objects directory: {objects_dir}")

        def emit(instruction, target_name, level, rects, rect_rel):
            save_rects(os.path.join(config.root, rect_rel), rects)
            manifest_lines.append(json.dumps(
                {
                    "scene_id": scene_id,
                    "image": rgb_rel,
                    "depth": depth_rel,
                    "rects": rect_rel,
                    "instruction": instruction,
                    "target_name": target_name,
                    "target_level": level,
                    "instruction_kind": "explicit",
                },
                sort_keys=True,
            ))

        for object_id in sorted(os.listdir(objects_dir)):
            obj_dir = os.path.join(objects_dir, object_id)
            if not os.path.isdir(obj_dir):
                continue
            name, pose, parts, grasps = _load_object(obj_dir)
            view = CameraView(intrinsics=intrinsics, object_pose=pose, image_size=image_size)
            kept = [g for g in grasps if g.score >= config.score_cutoff]
            dropped_low_score += len(grasps) - len(kept)
            annotations = assign_grasps_to_parts(parts, kept, object_id=object_id)
            object_rects: List[GraspRect] = []
            part_rects: Dict[str, List[GraspRect]] = {}
            for ann in annotations:
                rects = []
                for grasp in ann.assigned_grasps:
                    try:
                        rects.append(project_grasp_to_rect(grasp, view, config.jaw_ratio))
                    except ValueError:
                        skipped_projection += 1
                part_rects[ann.part_name] = rects
                object_rects.extend(rects)
            if object_rects:
                emit(f"Pick up the {name}.", name, "object",
                     object_rects, f"rects/{scene_id}_{object_id}_object.txt")
            for part_name, rects in part_rects.items():
                if not rects:
                    continue
                target = f"{part_name} of the {name}"
                emit(f"Grasp the {target}.", target, "part", rects,
                     f"rects/{scene_id}_{object_id}_part_{part_name}.txt")
    with open(os.path.join(config.root, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    return {
        "samples": len(manifest_lines),
        "dropped_low_score": dropped_low_score,
        "skipped_projection": skipped_projection,
    }
