"""Synthetic dataset builder, vocabulary, manifest loading, and the
external-tree importer."""

import filecmp
import json
import math
import os

import numpy as np
import pytest
from PIL import Image

from langrasp.data.manifest import load_generic, load_samples, split_scenes
from langrasp.data.graspnet import ImportConfig, import_graspnet_tree
from langrasp.data.synthetic import (
    COLOR_RGB,
    FUNCTIONS,
    PART_CUES,
    SceneObject,
    SyntheticConfig,
    build_synthetic_dataset,
    load_scene_specs,
    object_grasp_rects,
    object_name,
    part_target_name,
    render_object_mask,
)
from langrasp.geometry import angle_delta
from langrasp.vocab import SPECIALS, UNK_ID, Vocab


# ----------------------------------------------------------------- vocabulary

def test_vocab_build_encode_decode():
    v = Vocab.from_texts(["Grasp the red bar.", "What colors do you see?"])
    assert tuple(v.tokens[: len(SPECIALS)]) == SPECIALS
    ids = v.encode("Grasp the RED bar.")
    assert v.decode(ids) == "grasp the red bar ."
    assert v.encode("zebra")[0] == UNK_ID
    # prompt scaffold words are always present
    assert "instruction" in v.index and ":" in v.index


def test_vocab_save_load_roundtrip(tmp_path):
    v = Vocab.from_texts(["pick up the cyan mug"])
    path = str(tmp_path / "vocab.txt")
    v.save(path)
    assert Vocab.load(path).tokens == v.tokens


def test_vocab_rejects_bad_token_lists():
    with pytest.raises(ValueError):
        Vocab(["a", "b"])
    with pytest.raises(ValueError):
        Vocab(list(SPECIALS) + ["a", "a"])


# ------------------------------------------------------------ synthetic build

@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("synth"))
    config = SyntheticConfig(out_dir=out, scenes=12, seed=7)
    summary = build_synthetic_dataset(config)
    return out, config, summary


def _tree_files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = path
    return out


def test_build_deterministic(tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (out_a, out_b):
        build_synthetic_dataset(SyntheticConfig(out_dir=out, scenes=3, seed=11))
    files_a, files_b = _tree_files(out_a), _tree_files(out_b)
    assert sorted(files_a) == sorted(files_b)
    for rel in files_a:
        assert filecmp.cmp(files_a[rel], files_b[rel], shallow=False), rel


def test_horizontal_bar_grasped_across():
    obj = SceneObject("bar", "red", 48.0, 48.0, 0.0, 5.0)
    rects = object_grasp_rects(obj)["shaft"]
    assert len(rects) == 3
    for rect in rects:
        assert angle_delta(rect.angle, math.pi / 2.0) == pytest.approx(0.0, abs=1e-12)
        assert rect.width == pytest.approx(10.0)


def test_build_counts_and_files(built):
    out, config, summary = built
    specs = load_scene_specs(out)
    assert len(specs) == config.scenes
    n_objects = sum(len(s.objects) for s in specs)
    assert summary["samples"] == 4 * n_objects
    assert summary["generic"] == 2 * config.scenes
    for scene in specs:
        assert os.path.isfile(os.path.join(out, f"images/{scene.scene_id}.png"))
        img = Image.open(os.path.join(out, f"images/{scene.scene_id}.png"))
        assert img.size == (config.image_size, config.image_size)
        depth = np.asarray(Image.open(os.path.join(out, f"depth/{scene.scene_id}.png")))
        assert depth.dtype == np.uint16
        # objects sit above the desk plane
        assert depth.min() < 600 - 10
    # shapes are pairwise distinct within each scene
    for scene in specs:
        shapes = [o.shape for o in scene.objects]
        assert len(set(shapes)) == len(shapes)


def test_masks_disjoint_and_rects_in_bounds(built):
    out, config, _ = built
    for scene in load_scene_specs(out):
        occupancy = np.zeros((config.image_size, config.image_size), dtype=bool)
        for obj in scene.objects:
            mask = render_object_mask(obj, config.image_size)
            assert not (mask & occupancy).any()
            occupancy |= mask
            for rects in object_grasp_rects(obj, config.jaw_ratio).values():
                for rect in rects:
                    assert rect.corners.min() >= 0.0
                    assert rect.corners.max() <= config.image_size - 1.0


def test_samples_load_and_split(built):
    out, config, summary = built
    train = list(load_samples(out, "train"))
    test = list(load_samples(out, "test"))
    assert len(train) + len(test) == summary["samples"]
    train_scenes = {s.scene_id for s in train}
    test_scenes = {s.scene_id for s in test}
    assert not train_scenes & test_scenes
    expected_train, expected_test = split_scenes(
        [s.scene_id for s in load_scene_specs(out)], 0.9
    )
    assert train_scenes == expected_train
    assert test_scenes == expected_test
    # four kinds appear
    cells = {(s.target_level, s.instruction_kind) for s in train}
    assert cells == {("object", "explicit"), ("object", "implicit"),
                     ("part", "explicit"), ("part", "implicit")}


def test_generic_samples_load(built):
    out, config, _ = built
    generic = load_generic(out)
    assert len(generic) == 2 * config.scenes
    assert all(g.response for g in generic)


def test_vocab_covers_all_texts(built):
    out, _, _ = built
    vocab = Vocab.load(os.path.join(out, "vocab.txt"))
    texts = [s.instruction for s in load_samples(out, "train")]
    texts += [g.instruction + " " + g.response for g in load_generic(out)]
    for text in texts:
        assert UNK_ID not in vocab.encode(text), text


def test_packing_error_names_scene():
    config = SyntheticConfig(
        out_dir="/tmp/never_written", scenes=1, seed=0, image_size=40,
        min_objects=4, max_objects=4, max_place_attempts=20,
    )
    with pytest.raises(ValueError, match="scene 0"):
        build_synthetic_dataset(config)


# -------------------------------------------------------------- the resolver

def _resolve(instruction, objects):
    """Rule-based lookup: cue or function phrase plus color word -> target."""
    text = instruction.casefold()
    colors = [c for c in COLOR_RGB if c in text]
    assert len(colors) == 1, instruction
    color = colors[0]
    for (shape, part), cue in PART_CUES.items():
        if cue in text:
            hits = [o for o in objects if o.shape == shape and o.color == color]
            assert len(hits) == 1, instruction
            return part_target_name(hits[0], part)
    for shape, functions in FUNCTIONS.items():
        if any(fn in text for fn in functions):
            hits = [o for o in objects if o.shape == shape and o.color == color]
            assert len(hits) == 1, instruction
            return object_name(hits[0])
    raise AssertionError(f"no cue or function matched: {instruction}")


def test_implicit_instructions_resolvable(built):
    out, _, _ = built
    objects_by_scene = {s.scene_id: s.objects for s in load_scene_specs(out)}
    checked = 0
    for split in ("train", "test"):
        for sample in load_samples(out, split):
            if sample.instruction_kind != "implicit":
                continue
            resolved = _resolve(sample.instruction, objects_by_scene[sample.scene_id])
            assert resolved == sample.target_name
            checked += 1
    assert checked > 0


# ------------------------------------------------------------ split + errors

def test_split_exactly_90_10():
    ids = [f"scene_{i:04d}" for i in range(100)]
    train, test = split_scenes(ids, 0.9)
    assert len(train) == 90 and len(test) == 10
    assert not train & test
    again = split_scenes(list(reversed(ids)), 0.9)
    assert again == (train, test)


def test_split_fraction_one_empties_test():
    ids = [f"s{i}" for i in range(7)]
    train, test = split_scenes(ids, 1.0)
    assert len(train) == 7 and not test


def test_manifest_malformed_line_names_lineno(tmp_path):
    root = str(tmp_path)
    with open(os.path.join(root, "manifest.jsonl"), "w") as fh:
        fh.write('{"scene_id": "s0"}\n')
        fh.write("not json at all\n")
    with pytest.raises(ValueError, match="line 2"):
        list(load_samples(root, "train"))


def test_manifest_missing_image_names_path(tmp_path, built):
    out, _, _ = built
    root = str(tmp_path)
    with open(os.path.join(out, "manifest.jsonl")) as fh:
        first = fh.readline()
    rec = json.loads(first)
    os.makedirs(os.path.join(root, "rects"), exist_ok=True)
    with open(os.path.join(out, rec["rects"])) as fh:
        rects_text = fh.read()
    with open(os.path.join(root, rec["rects"]), "w") as fh:
        fh.write(rects_text)
    with open(os.path.join(root, "manifest.jsonl"), "w") as fh:
        fh.write(json.dumps(rec) + "\n")
    with pytest.raises(FileNotFoundError, match="missing image"):
        list(load_samples(root, "train", split_fraction=1.0))


def test_manifest_missing_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        list(load_samples(str(tmp_path), "train"))


# ------------------------------------------------------------- tree importer

def _write_mock_tree(root):
    scene = os.path.join(root, "scenes", "s001")
    obj = os.path.join(scene, "objects", "mug_0")
    os.makedirs(obj)
    Image.fromarray(np.zeros((64, 64, 3), dtype=np.uint8)).save(
        os.path.join(scene, "rgb.png")
    )
    with open(os.path.join(scene, "camera.json"), "w") as fh:
        json.dump({"intrinsics": [[120.0, 0.0, 32.0], [0.0, 120.0, 32.0], [0.0, 0.0, 1.0]]}, fh)
    pose = np.eye(4)
    pose[2, 3] = 0.5
    with open(os.path.join(obj, "pose.json"), "w") as fh:
        json.dump({"object_pose": pose.tolist()}, fh)
    with open(os.path.join(obj, "meta.json"), "w") as fh:
        json.dump({"name": "mug"}, fh)
    body = [[0.01 * i - 0.02, 0.01 * j - 0.02, 0.0] for i in range(5) for j in range(5)]
    handle = [[0.08, 0.01 * j - 0.01, 0.0] for j in range(3)]
    with open(os.path.join(obj, "parts.json"), "w") as fh:
        json.dump({"parts": [{"name": "body", "points": body},
                             {"name": "handle", "points": handle}]}, fh)
    axis_y = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    grasps = [
        {"position": [0.0, 0.0, 0.0], "rotation": np.eye(3).tolist(),
         "width": 0.08, "score": 0.8},
        {"position": [0.08, 0.0, 0.0], "rotation": axis_y, "width": 0.03, "score": 0.9},
        {"position": [0.0, 0.01, 0.0], "rotation": np.eye(3).tolist(),
         "width": 0.05, "score": 0.2},
    ]
    with open(os.path.join(obj, "grasps.json"), "w") as fh:
        json.dump({"grasps": grasps}, fh)


def test_import_mock_tree(tmp_path):
    root = str(tmp_path)
    _write_mock_tree(root)
    summary = import_graspnet_tree(ImportConfig(root=root, score_cutoff=0.5))
    assert summary["dropped_low_score"] == 1
    assert summary["skipped_projection"] == 0
    samples = list(load_samples(root, "train", split_fraction=1.0))
    names = sorted(s.target_name for s in samples)
    assert names == ["body of the mug", "handle of the mug", "mug"]
    by_name = {s.target_name: s for s in samples}
    # fronto-parallel projected width: fx * w / z
    body_rect = by_name["body of the mug"].gt_rects[0]
    assert body_rect.width == pytest.approx(120.0 * 0.08 / 0.5, rel=1e-6)
    assert len(by_name["mug"].gt_rects) == 2
    assert len(by_name["handle of the mug"].gt_rects) == 1


def test_import_missing_annotation_errors(tmp_path):
    root = str(tmp_path)
    _write_mock_tree(root)
    os.remove(os.path.join(root, "scenes", "s001", "objects", "mug_0", "grasps.json"))
    with pytest.raises(FileNotFoundError, match="grasps.json"):
        import_graspnet_tree(ImportConfig(root=root))
