"""Synthetic desk scenes: colored shapes with analytic grasp rectangles.

Eight object types (four shapes, two colors each) are placed without overlap
on a gray desk. Every object carries named parts built from rectangle/disk
primitives in its own frame, each part with hand-placed grasp rectangles
(bars are grasped across their narrow axis, handles across their thickness).
A build writes, all deterministic from the seed:

    images/scene_XXXX.png   RGB render
    depth/scene_XXXX.png    16-bit depth, millimeters
    rects/<scene>_<target>.txt  grasp rectangles (geometry file format)
    manifest.jsonl          one instruction sample per line
    generic.jsonl           instruction/response QA pairs, no grasp target
    scenes.jsonl            object layout per scene
    vocab.txt               word vocabulary over every produced string
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from langrasp.geometry import GraspRect, canonical_angle, rect_from_params, save_rects
from langrasp.vocab import Vocab

HALF_PI = math.pi / 2.0

SHAPES = ("bar", "tee", "ell", "mug")

# two colors per shape, pools disjoint across shapes, eight colors total
TYPE_COLORS: Dict[str, Tuple[str, str]] = {
    "bar": ("red", "blue"),
    "tee": ("green", "yellow"),
    "ell": ("orange", "purple"),
    "mug": ("cyan", "white"),
}

COLOR_RGB: Dict[str, Tuple[int, int, int]] = {
    "red": (200, 45, 45),
    "green": (50, 165, 70),
    "blue": (50, 80, 200),
    "yellow": (215, 200, 50),
    "orange": (230, 140, 40),
    "purple": (150, 65, 185),
    "cyan": (45, 190, 200),
    "white": (235, 235, 235),
}

BACKGROUND_RGB = (105, 105, 105)
DESK_DEPTH_MM = 600
OBJECT_DEPTH_MM = 580

# part geometry in object-frame units of the object scale: primitives are
# ("rect", cx, cy, w, h) or ("disk", cx, cy, r); grasps are
# (cx, cy, theta, opening) with the opening crossing the local narrow axis
PART_GEOMETRY: Dict[str, Tuple[Tuple[str, tuple, tuple], ...]] = {
    "bar": (
        ("shaft", (("rect", 0.0, 0.0, 4.0, 1.0),),
         ((-1.0, 0.0, HALF_PI, 2.0), (0.0, 0.0, HALF_PI, 2.0), (1.0, 0.0, HALF_PI, 2.0))),
    ),
    "tee": (
        ("crossbar", (("rect", 0.0, -0.75, 4.0, 1.0),),
         ((-1.1, -0.75, HALF_PI, 2.0), (1.1, -0.75, HALF_PI, 2.0))),
        ("stem", (("rect", 0.0, 0.75, 1.0, 2.5),),
         ((0.0, 0.75, 0.0, 2.0), (0.0, 1.5, 0.0, 2.0))),
    ),
    "ell": (
        ("arm", (("rect", -0.5, 0.0, 1.0, 4.0),),
         ((-0.5, -1.4, 0.0, 2.0), (-0.5, -0.4, 0.0, 2.0), (-0.5, 0.6, 0.0, 2.0))),
        ("foot", (("rect", 0.5, 1.5, 2.0, 1.0),),
         ((0.75, 1.5, HALF_PI, 2.0),)),
    ),
    "mug": (
        ("body", (("disk", 0.0, 0.0, 1.4),),
         ((0.0, 0.0, 0.0, 3.4), (0.0, 0.0, HALF_PI, 3.4))),
        ("handle", (("rect", 1.75, 0.0, 0.7, 1.6),),
         ((1.75, -0.45, 0.0, 1.4), (1.75, 0.45, 0.0, 1.4))),
    ),
}

# function phrases, unique per shape, never containing the shape word: these
# are the cues a rule-based resolver maps back to the shape
FUNCTIONS: Dict[str, Tuple[str, ...]] = {
    "bar": ("stir the paint", "prop the lid open", "poke the gap"),
    "tee": ("hang my towel", "tap the pipe", "mark a corner"),
    "ell": ("brace the shelf", "hook the latch", "square the frame"),
    "mug": ("drink my coffee", "hold my pens", "scoop some water"),
}

# cue phrases, unique per (shape, part), never containing the shape word,
# the part name, or any color word
PART_CUES: Dict[Tuple[str, str], str] = {
    ("bar", "shaft"): "the straight rod",
    ("tee", "crossbar"): "the top beam",
    ("tee", "stem"): "the upright post",
    ("ell", "arm"): "the tall side of the angle piece",
    ("ell", "foot"): "the short base of the angle piece",
    ("mug", "body"): "the round cup",
    ("mug", "handle"): "the loop on the side of the cup",
}

EXPLICIT_OBJECT_TEMPLATES = (
    "Grasp the {name}.",
    "Pick up the {name}.",
    "Hand me the {name}.",
    "Pass me the {name}.",
    "Move the {name} closer.",
)
IMPLICIT_OBJECT_TEMPLATES = (
    "I need the {color} one to {function}.",
    "Find me the {color} thing so I can {function}.",
    "I want to {function}, get the {color} one.",
)
EXPLICIT_PART_TEMPLATES = (
    "Grasp the {name}.",
    "Grab the {name}.",
    "Hold the {name}.",
    "Take the {name}.",
)
IMPLICIT_PART_TEMPLATES = (
    "Grab {cue}, the {color} one.",
    "Hold onto {cue} in {color}.",
    "Grip {cue} on the {color} item.",
)

COUNT_WORDS = {2: "two", 3: "three", 4: "four"}

MANIFEST_FIELDS = (
    "scene_id", "image", "depth", "rects", "instruction",
    "target_name", "target_level", "instruction_kind",
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    x: float
    y: float
    orientation: float
    scale: float


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    objects: Tuple[SceneObject, ...]


@dataclass
class SyntheticConfig:
    out_dir: str
    scenes: int = 200
    seed: int = 7
    image_size: int = 96
    min_objects: int = 2
    max_objects: int = 4
    jaw_ratio: float = 0.5
    max_place_attempts: int = 1000

    def __post_init__(self) -> None:
        if self.scenes <= 0:
            raise ValueError(f"scenes must be > 0, got {self.scenes}")
        if not 1 <= self.min_objects <= self.max_objects <= len(SHAPES):
            raise ValueError(
                f"need 1 <= min_objects <= max_objects <= {len(SHAPES)}, "
                f"got {self.min_objects}..{self.max_objects}"
            )
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")


def object_name(obj: SceneObject) -> str:
    return f"{obj.color} {obj.shape}"


def part_target_name(obj: SceneObject, part: str) -> str:
    return f"{part} of the {obj.color} {obj.shape}"


def object_grasp_rects(obj: SceneObject, jaw_ratio: float = 0.5) -> Dict[str, List[GraspRect]]:
    """Grasp rectangles per part, in image pixels, for one placed object."""
    cos_o, sin_o = math.cos(obj.orientation), math.sin(obj.orientation)
    out: Dict[str, List[GraspRect]] = {}
    for part_name, _, grasps in PART_GEOMETRY[obj.shape]:
        rects = []
        for gx, gy, gtheta, opening in grasps:
            wx = obj.x + obj.scale * (gx * cos_o - gy * sin_o)
            wy = obj.y + obj.scale * (gx * sin_o + gy * cos_o)
            theta = canonical_angle(gtheta + obj.orientation)
            width = opening * obj.scale
            rects.append(rect_from_params(wx, wy, theta, width, jaw_ratio * width))
        out[part_name] = rects
    return out


def render_object_mask(
    obj: SceneObject, image_size: int, part: str = None
) -> np.ndarray:
    """Boolean occupancy of one object (or a single named part)."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dx = xx - obj.x
    dy = yy - obj.y
    cos_o, sin_o = math.cos(obj.orientation), math.sin(obj.orientation)
    ux = (dx * cos_o + dy * sin_o) / obj.scale
    uy = (-dx * sin_o + dy * cos_o) / obj.scale
    mask = np.zeros((image_size, image_size), dtype=bool)
    found = False
    for part_name, primitives, _ in PART_GEOMETRY[obj.shape]:
        if part is not None and part_name != part:
            continue
        found = True
        for prim in primitives:
            if prim[0] == "rect":
                _, cx, cy, w, h = prim
                mask |= (np.abs(ux - cx) <= w / 2.0) & (np.abs(uy - cy) <= h / 2.0)
            else:
                _, cx, cy, r = prim
                mask |= (ux - cx) ** 2 + (uy - cy) ** 2 <= r * r
    if part is not None and not found:
        raise ValueError(f"shape {obj.shape!r} has no part {part!r}")
    return mask


def _rects_in_bounds(rects: Sequence[GraspRect], image_size: int) -> bool:
    for rect in rects:
        c = rect.corners
        if c.min() < 1.0 or c.max() > image_size - 2.0:
            return False
    return True


def _place_objects(
    rng: np.random.Generator, config: SyntheticConfig, scene_index: int
) -> List[SceneObject]:
    size = config.image_size
    s_base = size / 18.0
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    shapes = [SHAPES[i] for i in rng.permutation(len(SHAPES))[:n]]
    occupancy = np.zeros((size, size), dtype=bool)
    structure = np.ones((5, 5), dtype=bool)
    placed: List[SceneObject] = []
    for j, shape in enumerate(shapes):
        color = TYPE_COLORS[shape][int(rng.integers(0, 2))]
        for _ in range(config.max_place_attempts):
            scale = round(s_base * float(rng.uniform(0.9, 1.1)), 3)
            ext = 2.9 * scale + 2.0
            if size - 2.0 * ext <= 1.0:
                raise ValueError(
                    f"image_size {size} leaves no room for objects at scale {scale}"
                )
            candidate = SceneObject(
                shape=shape,
                color=color,
                x=round(float(rng.uniform(ext, size - ext)), 2),
                y=round(float(rng.uniform(ext, size - ext)), 2),
                orientation=round(float(rng.uniform(0.0, math.pi)), 4),
                scale=scale,
            )
            all_rects = [
                r for rects in object_grasp_rects(candidate, config.jaw_ratio).values()
                for r in rects
            ]
            if not _rects_in_bounds(all_rects, size):
                continue
            mask = render_object_mask(candidate, size)
            dilated = ndimage.binary_dilation(mask, structure=structure)
            if (dilated & occupancy).any():
                continue
            occupancy |= dilated
            placed.append(candidate)
            break
        else:
            raise ValueError(
                f"scene {scene_index}: could not place object {j} ({shape}) "
                f"after {config.max_place_attempts} attempts"
            )
    return placed


def render_scene(
    spec: SceneSpec, image_size: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """RGB uint8 render plus uint16 depth in millimeters."""
    rgb = np.empty((image_size, image_size, 3), dtype=np.float64)
    rgb[:] = BACKGROUND_RGB
    depth = np.full((image_size, image_size), DESK_DEPTH_MM, dtype=np.float64)
    for obj in spec.objects:
        mask = render_object_mask(obj, image_size)
        rgb[mask] = COLOR_RGB[obj.color]
        depth[mask] = OBJECT_DEPTH_MM
    rgb += rng.normal(0.0, 3.0, rgb.shape)
    depth += rng.normal(0.0, 1.0, depth.shape)
    return (
        np.clip(np.rint(rgb), 0, 255).astype(np.uint8),
        np.clip(np.rint(depth), 0, 65535).astype(np.uint16),
    )


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(0, len(options)))]


def _color_list_phrase(colors: Sequence[str]) -> str:
    unique = sorted(set(colors))
    if len(unique) == 1:
        return unique[0]
    return ", ".join(unique[:-1]) + " and " + unique[-1]


def build_synthetic_dataset(config: SyntheticConfig) -> Dict[str, int]:
    """Render every scene and write the full dataset tree; returns counts."""
    out = config.out_dir
    for sub in ("images", "depth", "rects"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    manifest_lines: List[str] = []
    generic_lines: List[str] = []
    scene_lines: List[str] = []
    texts: List[str] = []
    seeds = np.random.SeedSequence(config.seed).spawn(config.scenes)
    for i in range(config.scenes):
        rng = np.random.default_rng(seeds[i])
        scene_id = f"scene_{i:04d}"
        objects = _place_objects(rng, config, i)
        spec = SceneSpec(scene_id=scene_id, objects=tuple(objects))
        rgb, depth = render_scene(spec, config.image_size, rng)
        image_rel = f"images/{scene_id}.png"
        depth_rel = f"depth/{scene_id}.png"
        Image.fromarray(rgb).save(os.path.join(out, image_rel))
        Image.fromarray(depth.astype("<u2")).save(os.path.join(out, depth_rel))
        scene_lines.append(json.dumps(
            {
                "scene_id": scene_id,
                "objects": [
                    {
                        "shape": o.shape, "color": o.color, "x": o.x, "y": o.y,
                        "orientation": o.orientation, "scale": o.scale,
                    }
                    for o in objects
                ],
            },
            sort_keys=True,
        ))

        def emit(instruction, target_name, level, kind, rects_rel):
            manifest_lines.append(json.dumps(
                {
                    "scene_id": scene_id,
                    "image": image_rel,
                    "depth": depth_rel,
                    "rects": rects_rel,
                    "instruction": instruction,
                    "target_name": target_name,
                    "target_level": level,
                    "instruction_kind": kind,
                },
                sort_keys=True,
            ))
            texts.append(instruction)
            texts.append(target_name)

        for oi, obj in enumerate(objects):
            per_part = object_grasp_rects(obj, config.jaw_ratio)
            object_rects = [r for rects in per_part.values() for r in rects]
            obj_rel = f"rects/{scene_id}_o{oi}_object.txt"
            save_rects(os.path.join(out, obj_rel), object_rects)
            name = object_name(obj)
            emit(_pick(rng, EXPLICIT_OBJECT_TEMPLATES).format(name=name),
                 name, "object", "explicit", obj_rel)
            emit(
                _pick(rng, IMPLICIT_OBJECT_TEMPLATES).format(
                    color=obj.color, function=_pick(rng, FUNCTIONS[obj.shape])
                ),
                name, "object", "implicit", obj_rel,
            )
            part_names = [p for p, _, _ in PART_GEOMETRY[obj.shape]]
            part = part_names[int(rng.integers(0, len(part_names)))]
            part_rel = f"rects/{scene_id}_o{oi}_part_{part}.txt"
            save_rects(os.path.join(out, part_rel), per_part[part])
            pname = part_target_name(obj, part)
            emit(_pick(rng, EXPLICIT_PART_TEMPLATES).format(name=pname),
                 pname, "part", "explicit", part_rel)
            emit(
                _pick(rng, IMPLICIT_PART_TEMPLATES).format(
                    cue=PART_CUES[(obj.shape, part)], color=obj.color
                ),
                pname, "part", "implicit", part_rel,
            )

        count_q = "How many objects are on the table?"
        count_a = f"There are {COUNT_WORDS[len(objects)]} objects."
        colors_q = "What colors do you see?"
        colors_a = f"I see {_color_list_phrase([o.color for o in objects])}."
        for q, a in ((count_q, count_a), (colors_q, colors_a)):
            generic_lines.append(json.dumps(
                {"scene_id": scene_id, "image": image_rel,
                 "instruction": q, "response": a},
                sort_keys=True,
            ))
            texts.extend([q, a])

    with open(os.path.join(out, "manifest.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    with open(os.path.join(out, "generic.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(generic_lines) + "\n")
    with open(os.path.join(out, "scenes.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(scene_lines) + "\n")
    Vocab.from_texts(texts).save(os.path.join(out, "vocab.txt"))
    return {
        "scenes": config.scenes,
        "samples": len(manifest_lines),
        "generic": len(generic_lines),
    }


def load_scene_specs(root: str) -> List[SceneSpec]:
    """Read scenes.jsonl back into SceneSpec records."""
    path = os.path.join(root, "scenes.jsonl")
    specs: List[SceneSpec] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                objects = tuple(
                    SceneObject(
                        shape=o["shape"], color=o["color"], x=float(o["x"]),
                        y=float(o["y"]), orientation=float(o["orientation"]),
                        scale=float(o["scale"]),
                    )
                    for o in rec["objects"]
                )
                specs.append(SceneSpec(scene_id=rec["scene_id"], objects=objects))
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"scenes.jsonl line {lineno}: {err}") from err
    return specs
