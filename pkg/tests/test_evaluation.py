"""Token accuracy, R@k aggregation, report files, and annotated renders."""

import json
import math
import os

import numpy as np
import pytest
import torch
from PIL import Image

from langrasp.baselines import ModularPipeline, UnconditionedDetector
from langrasp.data.manifest import load_samples
from langrasp.data.types import InstructionSample
from langrasp.evaluation import (
    EvalConfig,
    EvalPrediction,
    EvalReport,
    CellMetrics,
    evaluate_model,
    make_handle,
    normalize_name,
    read_report,
    rect_pixel_corners,
    render_annotated,
    save_report,
    token_accuracy,
)
from langrasp.geometry import GraspPose2D, is_valid_grasp, pose_to_rect
from langrasp.grasp_head import GraspHeadConfig
from langrasp.model import InstructionGraspModel
from langrasp.vlm import BackboneConfig
from langrasp.vocab import EOS_ID, SPT_ID, Vocab

HEAD = GraspHeadConfig(in_channels=3, base_channels=4, residual_blocks=1, fusion_dim=16, input_size=48)
BACKBONE = BackboneConfig(
    hidden_dim=32, layers=1, heads=2, vision_patch=16, vision_tokens=9,
    adapter_rank=4, adapter_alpha=4, max_seq=64,
)


def make_sample(image_path, kind, level, instruction, target, pose):
    return InstructionSample(
        scene_id="s0",
        image_path=image_path,
        instruction=instruction,
        target_name=target,
        target_level=level,
        instruction_kind=kind,
        gt_rects=[pose_to_rect(pose)],
    )


@pytest.fixture(scope="module")
def flat_image(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("img") / "flat.png")
    Image.fromarray(np.full((48, 48, 3), 90, dtype=np.uint8)).save(path)
    return path


class TestTokenAccuracy:
    def test_normalize(self):
        assert normalize_name("Red  Mug ") == "red mug"
        assert normalize_name("red\tmug") == "red mug"

    def test_exact_match(self, flat_image):
        vocab = Vocab.from_texts(["pick up the red bar"])
        sample = make_sample(flat_image, "explicit", "object", "pick up the red bar",
                             "red bar", GraspPose2D(24, 24, 0.0, 10.0, 1.0))
        ids = [SPT_ID] + vocab.encode("red bar") + [SPT_ID, EOS_ID]
        assert token_accuracy(ids, sample, vocab) is True

    def test_wrong_name(self, flat_image):
        vocab = Vocab.from_texts(["the red bar and the blue disk"])
        sample = make_sample(flat_image, "explicit", "object", "pick up the red bar",
                             "red bar", GraspPose2D(24, 24, 0.0, 10.0, 1.0))
        ids = [SPT_ID] + vocab.encode("blue disk") + [SPT_ID, EOS_ID]
        assert token_accuracy(ids, sample, vocab) is False

    def test_missing_and_empty_span(self, flat_image):
        vocab = Vocab.from_texts(["red bar"])
        sample = make_sample(flat_image, "explicit", "object", "pick up the red bar",
                             "red bar", GraspPose2D(24, 24, 0.0, 10.0, 1.0))
        assert token_accuracy(vocab.encode("red bar"), sample, vocab) is False
        assert token_accuracy([SPT_ID, SPT_ID], sample, vocab) is False
        assert token_accuracy([], sample, vocab) is False


HIT = GraspPose2D(24.0, 24.0, 0.3, 10.0, 1.0)
MISS = GraspPose2D(5.0, 5.0, -1.2, 4.0, 0.5)


class _ScriptedHandle:
    """Plays back planted predictions keyed by the sample's instruction."""

    in_channels = 3

    def __init__(self, vocab):
        self.vocab = vocab

    def eval_predict(self, sample, image, head_image, config):
        good_ids = tuple([SPT_ID] + self.vocab.encode(sample.target_name) + [SPT_ID, EOS_ID])
        if "rank one" in sample.instruction:
            return EvalPrediction((HIT, MISS), good_ids)
        if "rank two" in sample.instruction:
            bad_ids = tuple([SPT_ID] + self.vocab.encode("wrong thing") + [SPT_ID, EOS_ID])
            return EvalPrediction((MISS, HIT), bad_ids)
        return EvalPrediction((MISS, MISS), (), failure="missing_target")


class TestAggregation:
    @pytest.fixture()
    def report(self, flat_image):
        vocab = Vocab.from_texts(["red bar handle wrong thing rank one two nothing grab it"])
        samples = [
            make_sample(flat_image, "explicit", "object", "rank one red bar", "red bar", HIT),
            make_sample(flat_image, "explicit", "object", "rank two red bar", "red bar", HIT),
            make_sample(flat_image, "explicit", "object", "nothing red bar", "red bar", HIT),
            make_sample(flat_image, "implicit", "part", "rank one grab it", "handle", HIT),
        ]
        assert is_valid_grasp(HIT, samples[0].gt_rects)
        assert not is_valid_grasp(MISS, samples[0].gt_rects)
        return evaluate_model(_ScriptedHandle(vocab), samples, EvalConfig(k_list=(1, 2)))

    def test_cell_fractions(self, report):
        cell = report.cell("explicit", "object")
        assert cell.count == 3
        assert cell.token_accuracy == pytest.approx(1 / 3)
        assert cell.r_at_k[1] == pytest.approx(1 / 3)
        assert cell.r_at_k[2] == pytest.approx(2 / 3)
        assert cell.failures == (("0002:s0", "missing_target"),)

    def test_perfect_cell(self, report):
        cell = report.cell("implicit", "part")
        assert cell.count == 1
        assert cell.token_accuracy == 1.0
        assert cell.r_at_k == {1: 1.0, 2: 1.0}

    def test_monotone_validated(self):
        with pytest.raises(ValueError, match="monotonicity"):
            CellMetrics(count=2, token_accuracy=0.5, r_at_k={1: 0.9, 3: 0.4})
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            CellMetrics(count=2, token_accuracy=1.5, r_at_k={1: 0.5})

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError, match="at least one sample"):
            evaluate_model(UnconditionedDetector(HEAD), [])

    def test_bad_k_list(self):
        with pytest.raises(ValueError, match="k_list"):
            EvalConfig(k_list=(3, 1))


class TestModelHandles:
    def test_untrained_model_end_to_end(self, toy_data):
        vocab = Vocab.load(os.path.join(toy_data, "vocab.txt"))
        torch.manual_seed(0)
        model = InstructionGraspModel(vocab, BACKBONE, HEAD)
        samples = list(load_samples(toy_data, "test"))[:4]
        config = EvalConfig(width_max=15.0, min_peak_dist=4.0)
        report = evaluate_model(model, samples, config)
        assert sum(c.count for c in report.cells.values()) == len(samples)
        for cell in report.cells.values():
            assert 0.0 <= cell.token_accuracy <= 1.0
            assert cell.r_at_k[1] <= cell.r_at_k[3]

    def test_reports_are_byte_identical(self, toy_data, tmp_path):
        vocab = Vocab.load(os.path.join(toy_data, "vocab.txt"))
        torch.manual_seed(0)
        model = InstructionGraspModel(vocab, BACKBONE, HEAD)
        samples = list(load_samples(toy_data, "test"))[:3]
        config = EvalConfig(width_max=15.0, min_peak_dist=4.0)
        paths = []
        for run in range(2):
            report = evaluate_model(model, samples, config)
            jsonl, _ = save_report(report, str(tmp_path / f"run{run}"))
            paths.append(jsonl)
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            assert a.read() == b.read()

    def test_unconditioned_handle(self, toy_data):
        torch.manual_seed(0)
        detector = UnconditionedDetector(HEAD)
        samples = list(load_samples(toy_data, "test"))[:2]
        report = evaluate_model(detector, samples, EvalConfig(width_max=15.0, min_peak_dist=4.0))
        for cell in report.cells.values():
            assert cell.token_accuracy == 0.0

    def test_modular_handle_counts_grounding_failures(self, toy_data):
        class _ProseGrounder:
            def ground(self, image, prompt, scene_id):
                return "somewhere near the middle"

        torch.manual_seed(0)
        pipeline = ModularPipeline(_ProseGrounder(), UnconditionedDetector(HEAD), width_max=15.0)
        samples = list(load_samples(toy_data, "test"))[:2]
        report = evaluate_model(pipeline, samples, EvalConfig(width_max=15.0))
        failures = [f for cell in report.cells.values() for f in cell.failures]
        assert len(failures) == len(samples)
        assert all(kind == "grounding_failure" for _, kind in failures)
        for cell in report.cells.values():
            assert all(v == 0.0 for v in cell.r_at_k.values())

    def test_unknown_model_rejected(self):
        with pytest.raises(TypeError, match="no evaluation handle"):
            make_handle(object())


class TestReportFiles:
    def test_roundtrip(self, tmp_path):
        report = EvalReport(
            k_list=(1, 3),
            cells={
                ("explicit", "object"): CellMetrics(3, 2 / 3, {1: 1 / 3, 3: 2 / 3}, (("0001:s2", "missing_target"),)),
                ("implicit", "part"): CellMetrics(2, 0.5, {1: 0.5, 3: 0.5}),
            },
        )
        jsonl, txt = save_report(report, str(tmp_path / "rep"))
        loaded = read_report(str(tmp_path / "rep"))
        assert loaded.k_list == (1, 3)
        cell = loaded.cell("explicit", "object")
        assert cell.count == 3
        assert cell.token_accuracy == pytest.approx(2 / 3, abs=1e-6)
        assert cell.failures == (("0001:s2", "missing_target"),)
        with open(jsonl) as fh:
            lines = [json.loads(line) for line in fh]
        assert [rec["instruction_kind"] for rec in lines] == ["explicit", "implicit"]
        with open(txt) as fh:
            text = fh.read()
        assert "R@1" in text and "failures: 1" in text


class TestRender:
    def test_empty_poses_copy(self):
        image = np.random.default_rng(0).integers(0, 255, (32, 32, 3)).astype(np.uint8)
        out = render_annotated(image, [])
        assert np.array_equal(out, image)
        assert out is not image

    def test_corner_oracle_and_pixels(self, tmp_path):
        pose = GraspPose2D(16.0, 14.0, 0.4, 12.0, 0.87)
        rect = pose_to_rect(pose)
        expected = [(int(round(float(x))), int(round(float(y)))) for x, y in rect.corners]
        assert rect_pixel_corners(pose) == expected
        image = np.zeros((32, 32, 3), dtype=np.uint8)
        out_path = str(tmp_path / "annotated.png")
        out = render_annotated(image, [pose], out_path=out_path)
        for x, y in expected:
            assert tuple(out[y, x]) == (230, 60, 60)
        with Image.open(out_path) as img:
            assert np.array_equal(np.asarray(img), out)

    def test_gt_stroke_differs(self):
        image = np.zeros((48, 48, 3), dtype=np.uint8)
        gt = pose_to_rect(GraspPose2D(30.0, 30.0, 0.0, 12.0, 1.0))
        out = render_annotated(image, [GraspPose2D(12.0, 12.0, 0.0, 8.0, 1.0)], gts=[gt])
        colors = {tuple(px) for px in out.reshape(-1, 3)}
        assert (230, 60, 60) in colors and (40, 200, 90) in colors

    def test_out_of_bounds_warns(self):
        image = np.zeros((32, 32, 3), dtype=np.uint8)
        with pytest.warns(UserWarning, match="clipped"):
            render_annotated(image, [GraspPose2D(30.0, 30.0, 0.2, 14.0, 1.0)])

    def test_tensor_and_path_inputs(self, flat_image):
        out_a = render_annotated(flat_image, [])
        out_b = render_annotated(torch.full((3, 48, 48), 90 / 255.0), [])
        assert out_a.shape == out_b.shape == (48, 48, 3)

    def test_bad_array_rejected(self):
        with pytest.raises(ValueError, match="uint8"):
            render_annotated(np.zeros((32, 32, 3), dtype=np.float32), [])
