"""Acceptance suite: one test per shipped guarantee, fast checks first.

test_criterion_4/5/7 share one desk-scale experiment (dataset build, training,
two CLI evaluations) through the module-scoped `desk` fixture; everything else
runs on purpose-built tiny inputs.
"""

import dataclasses
import hashlib
import json
import math
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from langrasp.baselines import ClipStyleModel, save_clip_baseline, train_clip_baseline
from langrasp.checkpoint import load_model_checkpoint
from langrasp.cli import main as cli_main
from langrasp.data.manifest import load_samples, split_scenes
from langrasp.data.parts import assign_grasps_to_parts, project_grasp_to_rect
from langrasp.data.types import CameraView, Grasp6D
from langrasp.evaluation import EvalConfig, evaluate_model, read_report
from langrasp.geometry import (
    GraspPose2D,
    angle_delta,
    canonical_angle,
    decode_grasps,
    is_valid_grasp,
    pose_to_rect,
    rasterize_gt_maps,
    rect_iou,
)
from langrasp.grasp_head import GraspHeadConfig, grasp_loss, maps_to_tensor
from langrasp.model import InstructionGraspModel
from langrasp.training import (
    ImageCache,
    TrainConfig,
    combined_loss,
    grasp_batch_losses,
    load_training_data,
    prepare_grasp_item,
    train,
)
from langrasp.vlm import BackboneConfig, apply_adapters
from langrasp.vocab import Vocab

from oracles import brute_force_nearest_part, mask_iou, pinhole_project

TINY_BACKBONE = BackboneConfig(
    hidden_dim=32, layers=1, heads=2, vision_patch=16, vision_tokens=9,
    adapter_rank=4, adapter_alpha=4, max_seq=64,
)
TINY_HEAD = GraspHeadConfig(in_channels=3, base_channels=4, residual_blocks=1, fusion_dim=16, input_size=48)
GRID_THETAS = [k * 0.015625 for k in range(-96, 96, 7)]

# desk-scale experiment settings (criteria 4, 5, 7)
DESK_SCENES = 200
DESK_IMAGE = 96
DESK_DATA_SEED = 12
DESK_EPOCHS = 28
DESK_WIDTH_MAX = 22.0
# peak extraction scaled to the 96 px render: objects span ~10-20 px, so the
# 8 px default would merge every candidate band of an object into one peak
DESK_MIN_PEAK_DIST = 4.0
DESK_SMOOTHING_SIGMA = 1.0
DESK_TRAIN_CONFIG = f"""\
lambda_text = 1.0
lambda_grasp = 1.0
freeze_epoch = 3
batch_size = 8
lr = 0.001
epochs = {DESK_EPOCHS}
seed = 0
width_max = {DESK_WIDTH_MAX}
image_size = {DESK_IMAGE}
hidden_dim = 128
layers = 2
heads = 4
vision_patch = 16
adapter_rank = 64
adapter_alpha = 64
max_seq = 96
fusion_dim = 64
head_in_channels = 3
head_base_channels = 16
head_residual_blocks = 2
projector_activation = "gelu"
"""


def random_pose(rng, image=160, wmin=15.0, wmax=48.0, margin=30.0):
    return GraspPose2D(
        x=float(rng.uniform(margin, image - margin)),
        y=float(rng.uniform(margin, image - margin)),
        theta=float(rng.uniform(-math.pi / 2, math.pi / 2)),
        width=float(rng.uniform(wmin, wmax)),
        quality=1.0,
    )


def test_criterion_1_geometry_kernel():
    rng = np.random.default_rng(11)
    # rasterize -> decode roundtrip, 500 poses
    worst = [0.0, 0.0, 0.0, 0.0]
    for _ in range(500):
        pose = random_pose(rng)
        maps = rasterize_gt_maps([pose_to_rect(pose)], (160, 160), width_max=50.0)
        dec = decode_grasps(maps, k=1, width_max=50.0)[0]
        worst[0] = max(worst[0], abs(dec.x - pose.x))
        worst[1] = max(worst[1], abs(dec.y - pose.y))
        worst[2] = max(worst[2], angle_delta(dec.theta, pose.theta))
        worst[3] = max(worst[3], abs(dec.width - pose.width) / pose.width)
    assert worst[0] <= 1.0 and worst[1] <= 1.0, f"roundtrip center off by {worst[:2]}"
    assert worst[2] <= math.radians(2.0), f"roundtrip angle off by {math.degrees(worst[2]):.3f} deg"
    assert worst[3] <= 0.05, f"roundtrip width off by {worst[3]:.4f}"

    # oriented-rectangle IoU vs supersampled mask oracle, 1000 pairs
    worst_iou = 0.0
    for _ in range(1000):
        a = random_pose(rng, image=96, wmin=10.0, wmax=30.0, margin=25.0)
        b = GraspPose2D(
            x=a.x + float(rng.uniform(-12, 12)),
            y=a.y + float(rng.uniform(-12, 12)),
            theta=float(rng.uniform(-math.pi / 2, math.pi / 2)),
            width=float(rng.uniform(10.0, 30.0)),
        )
        ra, rb = pose_to_rect(a), pose_to_rect(b)
        err = abs(rect_iou(ra, rb) - mask_iou(ra.corners, rb.corners, supersample=10))
        worst_iou = max(worst_iou, err)
    assert worst_iou <= 0.02, f"IoU deviates from mask oracle by {worst_iou:.4f}"

    # theta vs theta + pi, exact
    for theta in GRID_THETAS:
        assert canonical_angle(theta + math.pi) == canonical_angle(theta)
        a = rasterize_gt_maps([pose_to_rect(GraspPose2D(48, 48, theta, 24.0))], (96, 96), 50.0)
        b = rasterize_gt_maps([pose_to_rect(GraspPose2D(48, 48, theta + math.pi, 24.0))], (96, 96), 50.0)
        for name in ("quality", "cos2", "sin2", "width"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    # validity thresholds: strict 30 deg and strict 0.25 IoU
    gt = GraspPose2D(80.0, 80.0, 0.0, 40.0, 1.0)
    gt_rects = [pose_to_rect(gt)]
    ok29 = is_valid_grasp(GraspPose2D(80.0, 80.0, math.radians(29.0), 40.0), gt_rects)
    bad31 = is_valid_grasp(GraspPose2D(80.0, 80.0, math.radians(31.0), 40.0), gt_rects)
    assert ok29 and not bad31, f"angle boundary: 29deg={ok29} 31deg={bad31}"
    for target, expect in ((0.26, True), (0.24, False)):
        shift = gt.width * (1.0 - target) / (1.0 + target)
        pred = GraspPose2D(gt.x + shift, gt.y, 0.0, gt.width, 1.0)
        assert abs(rect_iou(pose_to_rect(pred), gt_rects[0]) - target) < 1e-9
        assert is_valid_grasp(pred, gt_rects) is expect, f"IoU {target} should be valid={expect}"


# ---- criterion 2: differentiation ----


def _double_items(model, data_root, n=2):
    cache = ImageCache()
    samples = list(load_samples(data_root, "train"))[:n]
    items = []
    for sample in samples:
        item = prepare_grasp_item(model, sample, cache)
        items.append(dataclasses.replace(
            item, image=item.image.double(), head_image=item.head_image.double()
        ))
    return items


def _max_grad_coord(loss_fn, param):
    grad = torch.autograd.grad(loss_fn(), [param])[0]
    index = int(grad.abs().view(-1).argmax())
    return index, float(grad.view(-1)[index])


def _central_diff(loss_fn, param, index, eps=1e-5):
    flat = param.data.view(-1)
    original = float(flat[index])
    flat[index] = original + eps
    hi = float(loss_fn().detach())
    flat[index] = original - eps
    lo = float(loss_fn().detach())
    flat[index] = original
    return (hi - lo) / (2.0 * eps)


def _fd_agree(loss_fn, param, label):
    index, analytic = _max_grad_coord(loss_fn, param)
    numeric = _central_diff(loss_fn, param, index)
    rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
    assert rel <= 1e-3, f"{label}: rel err {rel:.2e} (autograd {analytic:.6e} vs FD {numeric:.6e})"
    return rel


def test_criterion_2_differentiation(toy_data):
    torch.manual_seed(0)
    vocab = Vocab.load(os.path.join(toy_data, "vocab.txt"))
    model = InstructionGraspModel(vocab, TINY_BACKBONE, TINY_HEAD)
    apply_adapters(model.backbone)
    model.double().eval()
    items = _double_items(model, toy_data)
    config = TrainConfig(lambda_text=0.7, lambda_grasp=1.3, width_max=15.0)

    # grasp loss through the head to the fusion feature f
    images = torch.stack([item.head_image for item in items])
    gt = torch.stack([
        maps_to_tensor(rasterize_gt_maps(item.gt_rects, TINY_HEAD.input_size, config.width_max))
        for item in items
    ]).double()
    f = torch.randn(len(items), TINY_HEAD.fusion_dim, dtype=torch.float64, requires_grad=True)
    _fd_agree(lambda: grasp_loss(model.head(images, f), gt), f, "grasp_loss wrt f")

    # text loss through the backbone, and the combined objective
    def text_loss():
        return grasp_batch_losses(model, items, config.width_max)[0]

    def total_loss():
        l_text, l_grasp = grasp_batch_losses(model, items, config.width_max)[:2]
        return combined_loss(l_text, l_grasp, config)

    embedding = model.backbone.token_embedding.weight
    # probe the zero-initialized .up factor: .down has zero gradient while .up is zero
    adapter = next(p for name, p in model.named_parameters()
                   if name.endswith(".up.weight") and p.requires_grad)
    projector = next(model.projector.parameters())
    head_conv = next(p for p in model.head.parameters() if p.dim() == 4)
    _fd_agree(text_loss, embedding, "text_loss wrt token embedding")
    _fd_agree(total_loss, embedding, "combined wrt token embedding")
    _fd_agree(total_loss, adapter, "combined wrt adapter")
    _fd_agree(total_loss, projector, "combined wrt projector")
    _fd_agree(total_loss, head_conv, "combined wrt head conv")

    # adapter zero-init is a no-op on logits
    torch.manual_seed(1)
    fresh = InstructionGraspModel(vocab, TINY_BACKBONE, TINY_HEAD).eval()
    image = items[0].image.float()
    ids = torch.tensor([list(items[0].encoding.ids)], dtype=torch.long)
    with torch.no_grad():
        before = fresh.backbone(image.unsqueeze(0), ids)[0]
        apply_adapters(fresh.backbone)
        after = fresh.backbone(image.unsqueeze(0), ids)[0]
    assert torch.equal(before, after), "adapter insertion changed logits at zero init"


# ---- criterion 3: the two-phase schedule ----


def _toy_run(toy_data, out_dir, epochs=4):
    torch.manual_seed(5)
    vocab = Vocab.load(os.path.join(toy_data, "vocab.txt"))
    model = InstructionGraspModel(vocab, TINY_BACKBONE, TINY_HEAD)
    apply_adapters(model.backbone)
    datasets = load_training_data(model, toy_data)
    config = TrainConfig(freeze_epoch=3, batch_size=8, epochs=epochs, seed=21, width_max=15.0)
    result = train(model, datasets, config, out_dir)
    return model, result, datasets, config


def test_criterion_3_schedule(toy_data, tmp_path):
    model, result, datasets, config = _toy_run(toy_data, str(tmp_path / "run_a"))

    # (a) backbone (adapters included) bitwise frozen from the start of epoch 3
    def backbone_digest(directory):
        loaded, _ = load_model_checkpoint(directory)
        digest = hashlib.sha256()
        for name, tensor in sorted(loaded.state_dict().items()):
            if name.startswith("backbone."):
                digest.update(name.encode())
                digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()

    digests = [backbone_digest(d) for d in result.checkpoint_dirs]
    assert digests[1] == digests[2] == digests[3], "backbone changed after the freeze epoch"
    assert digests[0] != digests[1], "backbone never trained in phase 1"

    # (b) text loss detached after the switch, and zero weight in the objective
    l_text, l_grasp = grasp_batch_losses(model, datasets.grasp[:4], config.width_max)[:2]
    assert not l_text.requires_grad, "text loss still carries gradients after freezing"
    frozen_cfg = dataclasses.replace(config, lambda_text=0.0)
    total = combined_loss(l_text, l_grasp, frozen_cfg)
    assert float(total) == pytest.approx(float(l_grasp) * config.lambda_grasp)

    # (c) seed-identical loss curves across two fresh runs
    keys = ("step", "epoch", "phase", "source", "l_text", "l_grasp", "total", "lr")
    _, result_b, _, _ = _toy_run(toy_data, str(tmp_path / "run_b"))
    curve_a = [[m[k] for k in keys] for m in result.metrics]
    curve_b = [[m[k] for k in keys] for m in result_b.metrics]
    assert curve_a == curve_b, "two seeded runs diverged"


# ---- criterion 6: dataset pipeline oracles ----


def test_criterion_6_dataset_oracles():
    rng = np.random.default_rng(3)
    # part assignment vs brute-force nearest point, 100 grasps
    parts = [(f"part_{i}", rng.normal(scale=0.05, size=(30, 3)) + center)
             for i, center in enumerate([(0.1, 0, 0), (-0.1, 0.05, 0), (0, -0.1, 0.02), (0.05, 0.1, -0.04)])]
    grasps = [Grasp6D(position=rng.uniform(-0.2, 0.2, size=3), rotation=np.eye(3), width=0.04)
              for _ in range(100)]
    annotations = assign_grasps_to_parts(parts, grasps, object_id="obj")
    got = {}
    for pi, ann in enumerate(annotations):
        for grasp in ann.assigned_grasps:
            got[id(grasp)] = pi
    want = brute_force_nearest_part(np.stack([g.position for g in grasps]), [pts for _, pts in parts])
    assert [got[id(g)] for g in grasps] == want, "part assignment disagrees with brute force"

    # projection vs pinhole oracle, 1 px center / 1% width
    for _ in range(200):
        fx, fy = rng.uniform(80, 140, size=2)
        cx, cy = rng.uniform(40, 56, size=2)
        angle = rng.uniform(-0.4, 0.4)
        rot = np.array([[math.cos(angle), -math.sin(angle), 0.0],
                        [math.sin(angle), math.cos(angle), 0.0],
                        [0.0, 0.0, 1.0]])
        translation = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.4, 0.6)])
        pose_mat = np.eye(4)
        pose_mat[:3, :3] = rot
        pose_mat[:3, 3] = translation
        view = CameraView(
            intrinsics=np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]]),
            object_pose=pose_mat,
            image_size=(96, 96),
        )
        grasp = Grasp6D(position=rng.uniform(-0.03, 0.03, size=3), rotation=np.eye(3), width=0.03)
        rect = project_grasp_to_rect(grasp, view)
        center_cam = rot @ grasp.position + translation
        u0, v0 = pinhole_project(center_cam, fx, fy, cx, cy)
        assert math.hypot(rect.center[0] - u0, rect.center[1] - v0) <= 1.0
        tips = [grasp.position + s * 0.5 * grasp.width * grasp.closing_axis for s in (-1, 1)]
        uv = [pinhole_project(rot @ t + translation, fx, fy, cx, cy) for t in tips]
        width_oracle = math.hypot(uv[1][0] - uv[0][0], uv[1][1] - uv[0][1])
        assert abs(rect.width - width_oracle) / width_oracle <= 0.01

    # deterministic exact 90/10 scene split
    ids = [f"scene_{i:04d}" for i in range(200)]
    train_ids, test_ids = split_scenes(ids, 0.9)
    assert len(train_ids) == 180 and len(test_ids) == 20
    assert train_ids | test_ids == set(ids) and not (train_ids & test_ids)
    assert split_scenes(ids, 0.9) == (train_ids, test_ids)


# ---- criteria 4, 5, 7: the desk-scale experiment ----


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data = str(root / "data")
    run = str(root / "run")
    started = time.monotonic()
    assert cli_main(["dataset", "build", "--out", data, "--scenes", str(DESK_SCENES),
                     "--seed", str(DESK_DATA_SEED), "--image-size", str(DESK_IMAGE)]) == 0
    config_path = str(root / "train.txt")
    with open(config_path, "w", encoding="utf-8") as fh:
        fh.write(DESK_TRAIN_CONFIG)
    assert cli_main(["train", "--config", config_path, "--data", data, "--out", run]) == 0
    eval_dirs = [str(root / f"eval{i}") for i in (1, 2)]
    for out in eval_dirs:
        assert cli_main(["eval", "--model", os.path.join(run, "final"), "--data", data, "--out", out,
                         "--min-peak-dist", str(DESK_MIN_PEAK_DIST),
                         "--smoothing-sigma", str(DESK_SMOOTHING_SIGMA)]) == 0
    elapsed = time.monotonic() - started
    return SimpleNamespace(
        data=data,
        run=run,
        final=os.path.join(run, "final"),
        eval_dirs=eval_dirs,
        report=read_report(eval_dirs[0]),
        elapsed=elapsed,
    )


def test_criterion_4_desk_experiment(desk):
    report = desk.report
    by_kind = {"explicit": [0, 0], "implicit": [0, 0]}
    for (kind, _level), cell in report.cells.items():
        by_kind[kind][0] += cell.token_accuracy * cell.count
        by_kind[kind][1] += cell.count
    token_explicit = by_kind["explicit"][0] / by_kind["explicit"][1]
    token_implicit = by_kind["implicit"][0] / by_kind["implicit"][1]
    eo = report.cell("explicit", "object")
    ip = report.cell("implicit", "part")
    print(f"[desk] elapsed {desk.elapsed:.0f}s; token explicit {token_explicit:.3f} implicit {token_implicit:.3f}; "
          f"explicit-object R@1 {eo.r_at_k[1]:.3f} R@3 {eo.r_at_k[3]:.3f}; implicit-part R@1 {ip.r_at_k[1]:.3f}")
    assert desk.elapsed <= 1800.0, f"experiment took {desk.elapsed:.0f}s (> 30 min)"
    assert token_explicit >= 0.95, f"explicit token accuracy {token_explicit:.3f} < 0.95"
    assert token_implicit >= 0.85, f"implicit token accuracy {token_implicit:.3f} < 0.85"
    assert eo.r_at_k[1] >= 0.70, f"explicit-object R@1 {eo.r_at_k[1]:.3f} < 0.70"
    assert eo.r_at_k[3] >= 0.85, f"explicit-object R@3 {eo.r_at_k[3]:.3f} < 0.85"
    assert ip.r_at_k[1] >= 0.50, f"implicit-part R@1 {ip.r_at_k[1]:.3f} < 0.50"
    for key, cell in report.cells.items():
        assert cell.r_at_k[1] <= cell.r_at_k[3] + 1e-12, f"R@1 > R@3 in cell {key}"


@pytest.fixture(scope="module")
def desk_clip(desk, tmp_path_factory):
    torch.manual_seed(0)
    vocab = Vocab.load(os.path.join(desk.data, "vocab.txt"))
    head = GraspHeadConfig(in_channels=3, base_channels=16, residual_blocks=2,
                           fusion_dim=64, input_size=DESK_IMAGE)
    # items carry instruction text and prepared tensors; the throwaway wrapper
    # below only provides encode/validation plumbing for data loading
    wrapper = InstructionGraspModel(
        vocab,
        BackboneConfig(hidden_dim=32, layers=1, heads=2, vision_patch=16,
                       vision_tokens=(DESK_IMAGE // 16) ** 2, adapter_rank=4, adapter_alpha=4, max_seq=96),
        head,
    )
    items = load_training_data(wrapper, desk.data).grasp
    clip = ClipStyleModel(vocab, head, text_dim=64)
    config = TrainConfig(batch_size=8, lr=1e-3, epochs=DESK_EPOCHS, seed=0, width_max=DESK_WIDTH_MAX)
    train_clip_baseline(clip, items, config)
    out = str(tmp_path_factory.mktemp("clip") / "ckpt")
    save_clip_baseline(out, clip, extra={"width_max": config.width_max})
    return SimpleNamespace(model=clip, checkpoint=out, config=config)


def test_criterion_5_baseline_ordering(desk, desk_clip):
    samples = list(load_samples(desk.data, "test"))
    report = evaluate_model(desk_clip.model, samples,
                            EvalConfig(width_max=desk_clip.config.width_max,
                                       min_peak_dist=DESK_MIN_PEAK_DIST,
                                       smoothing_sigma=DESK_SMOOTHING_SIGMA))
    clip_ip = report.cell("implicit", "part").r_at_k[1]
    full_ip = desk.report.cell("implicit", "part").r_at_k[1]
    print(f"[desk] implicit-part R@1: full {full_ip:.3f} vs clip-style {clip_ip:.3f}")
    assert full_ip > clip_ip, f"full model ({full_ip:.3f}) not above clip baseline ({clip_ip:.3f})"


def test_criterion_7_eval_determinism(desk):
    blobs = []
    for out in desk.eval_dirs:
        with open(os.path.join(out, "report.jsonl"), "rb") as fh:
            blobs.append(fh.read())
    assert blobs[0] == blobs[1], "two eval invocations produced different reports"


def test_trained_fusion_steers_detection(desk):
    """The trained head must respond to the fusion feature, not just the image."""
    model, _ = load_model_checkpoint(desk.final)
    model.eval()
    samples = [s for s in load_samples(desk.data, "test") if s.target_level == "object"]
    cache = ImageCache()
    sample = samples[0]
    others = [s for s in samples if s.scene_id == sample.scene_id and s.target_name != sample.target_name]
    assert others, "scene has only one object"
    image = cache.get(sample.image_path)
    a = model.infer(image, sample.instruction)
    b = model.infer(image, others[0].instruction)
    shift = float(np.abs(a.maps.quality - b.maps.quality).mean())
    print(f"[desk] mean |dQ| across object targets: {shift:.4f}")
    assert shift > 1e-3, "quality maps identical across different instructions"
