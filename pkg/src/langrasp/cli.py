"""Command-line entry point: dataset building, training, evaluation, prediction.

Exit codes group errors by class: 2 configuration, 3 data, 4 runtime. Every
directory-producing run drops exactly one immutable run_manifest.json.
"""

import argparse
import dataclasses
import datetime
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import torch

from . import __version__
from .baselines import CLIP_KIND, DETECTOR_KIND, load_clip_baseline, load_unconditioned
from .checkpoint import MODEL_KIND, load_model_checkpoint, read_config
from .data.graspnet import ImportConfig, import_graspnet_tree
from .data.instructions import HttpCompletionClient, generate_instructions
from .data.manifest import load_samples
from .data.synthetic import SyntheticConfig, build_synthetic_dataset
from .evaluation import EvalConfig, evaluate_model, format_report_table, read_report, render_annotated, save_report
from .geometry import decode_grasps
from .grasp_head import GraspHeadConfig
from .model import InstructionGraspModel
from .training import ImageCache, TrainConfig, load_training_data, train
from .vlm import BackboneConfig, apply_adapters
from .vocab import Vocab

CONFIG_ERROR = 2
DATA_ERROR = 3
RUNTIME_ERROR = 4

MANIFEST_NAME = "run_manifest.json"

# architecture keys accepted in the train config file, with desk-scale defaults
MODEL_DEFAULTS: Dict[str, object] = {
    "image_size": 96,
    "hidden_dim": 128,
    "layers": 2,
    "heads": 4,
    "vision_patch": 16,
    "adapter_rank": 64,
    "adapter_alpha": 64,
    "max_seq": 96,
    "fusion_dim": 64,
    "head_in_channels": 3,
    "head_base_channels": 16,
    "head_residual_blocks": 2,
    "projector_activation": "gelu",
}


class CliError(Exception):
    def __init__(self, exit_code: int, message: str) -> None:
        super().__init__(message)
        self.exit_code = exit_code


# ---- run manifests ----


def check_manifest_absent(out_dir: str) -> None:
    path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(path):
        raise CliError(CONFIG_ERROR, f"{path} already exists; run manifests are immutable, pick a fresh directory")


def write_run_manifest(out_dir: str, command: str, config: Dict[str, object], seed: Optional[int], started: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, MANIFEST_NAME)
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started_at": started,
        "finished_at": _utc_now(),
    }
    try:
        with open(path, "x", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except FileExistsError:
        raise CliError(CONFIG_ERROR, f"{path} already exists; run manifests are immutable") from None
    return path


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


# ---- model loading shared by eval and predict ----


def load_any_model(directory: str):
    """(model, extra, kind) for any checkpoint directory, keyed by model_kind."""
    config_path = os.path.join(directory, "config.txt")
    if not os.path.isfile(config_path):
        raise CliError(DATA_ERROR, f"not a checkpoint directory (no config.txt): {directory}")
    kind = read_config(config_path).get("model_kind")
    loaders = {
        MODEL_KIND: load_model_checkpoint,
        CLIP_KIND: load_clip_baseline,
        DETECTOR_KIND: load_unconditioned,
    }
    if kind not in loaders:
        raise CliError(DATA_ERROR, f"unknown model_kind {kind!r} in {config_path}")
    model, extra = loaders[kind](directory)
    return model, extra, kind


# ---- dataset subcommands ----


def _cmd_dataset_build(args: argparse.Namespace) -> int:
    started = _utc_now()
    check_manifest_absent(args.out)
    try:
        config = SyntheticConfig(
            out_dir=args.out,
            scenes=args.scenes,
            seed=args.seed,
            image_size=args.image_size,
            min_objects=args.min_objects,
            max_objects=args.max_objects,
        )
    except ValueError as err:
        raise CliError(CONFIG_ERROR, str(err)) from err
    stats = build_synthetic_dataset(config)
    for key in sorted(stats):
        print(f"{key}: {stats[key]}")
    write_run_manifest(args.out, "dataset build", dataclasses.asdict(config), args.seed, started)
    return 0


def _cmd_dataset_import(args: argparse.Namespace) -> int:
    started = _utc_now()
    check_manifest_absent(args.root)
    try:
        config = ImportConfig(root=args.root, score_cutoff=args.score_cutoff, jaw_ratio=args.jaw_ratio)
    except ValueError as err:
        raise CliError(CONFIG_ERROR, str(err)) from err
    try:
        stats = import_graspnet_tree(config)
    except FileNotFoundError as err:
        raise CliError(DATA_ERROR, str(err)) from err
    except (ValueError, KeyError) as err:
        raise CliError(DATA_ERROR, f"malformed import tree: {err}") from err
    for key in sorted(stats):
        print(f"{key}: {stats[key]}")
    write_run_manifest(args.root, "dataset import-graspnet", dataclasses.asdict(config), None, started)
    return 0


def _cmd_dataset_gen(args: argparse.Namespace) -> int:
    try:
        with open(args.descriptions, "r", encoding="utf-8") as fh:
            targets = [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError as err:
        raise CliError(DATA_ERROR, str(err)) from err
    except json.JSONDecodeError as err:
        raise CliError(DATA_ERROR, f"{args.descriptions}: {err}") from err
    llm = HttpCompletionClient(endpoint=args.llm_endpoint) if args.llm_endpoint else None
    with open(args.out, "w", encoding="utf-8") as fh:
        for target in targets:
            try:
                result = generate_instructions(
                    target["object"],
                    tuple(target.get("parts", ())),
                    llm=llm,
                    per_kind=args.per_kind,
                )
            except (KeyError, ValueError) as err:
                raise CliError(DATA_ERROR, f"bad description record {target!r}: {err}") from err
            fh.write(json.dumps(
                {"object": target["object"], "pairs": list(result.pairs), "provenance": result.provenance},
                sort_keys=True,
            ) + "\n")
    print(f"wrote instruction sets for {len(targets)} targets to {args.out}")
    return 0


# ---- train ----


def _read_train_config(path: str):
    """Split the shared key-value config file into train and model settings."""
    try:
        raw = read_config(path)
    except FileNotFoundError as err:
        raise CliError(CONFIG_ERROR, f"missing config file: {path}") from err
    except ValueError as err:
        raise CliError(CONFIG_ERROR, str(err)) from err
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    train_kwargs, model_kwargs = {}, dict(MODEL_DEFAULTS)
    for key, value in raw.items():
        if key in train_fields:
            train_kwargs[key] = value
        elif key in MODEL_DEFAULTS:
            model_kwargs[key] = value
        else:
            raise CliError(CONFIG_ERROR, f"{path}: unknown config key {key!r}")
    try:
        train_config = TrainConfig(**train_kwargs)
        if model_kwargs["image_size"] % model_kwargs["vision_patch"] != 0:
            raise ValueError(
                f"image_size {model_kwargs['image_size']} not divisible by vision_patch {model_kwargs['vision_patch']}"
            )
        side = model_kwargs["image_size"] // model_kwargs["vision_patch"]
        backbone = BackboneConfig(
            hidden_dim=model_kwargs["hidden_dim"],
            layers=model_kwargs["layers"],
            heads=model_kwargs["heads"],
            vision_patch=model_kwargs["vision_patch"],
            vision_tokens=side * side,
            adapter_rank=model_kwargs["adapter_rank"],
            adapter_alpha=model_kwargs["adapter_alpha"],
            max_seq=model_kwargs["max_seq"],
        )
        head = GraspHeadConfig(
            in_channels=model_kwargs["head_in_channels"],
            base_channels=model_kwargs["head_base_channels"],
            residual_blocks=model_kwargs["head_residual_blocks"],
            fusion_dim=model_kwargs["fusion_dim"],
            input_size=model_kwargs["image_size"],
        )
    except (TypeError, ValueError) as err:
        raise CliError(CONFIG_ERROR, f"{path}: {err}") from err
    return train_config, backbone, head, model_kwargs["projector_activation"], raw


def _cmd_train(args: argparse.Namespace) -> int:
    started = _utc_now()
    train_config, backbone, head, activation, raw = _read_train_config(args.config)
    check_manifest_absent(args.out)
    vocab_path = os.path.join(args.data, "vocab.txt")
    if not os.path.isfile(vocab_path):
        raise CliError(DATA_ERROR, f"missing vocabulary file: {vocab_path}")
    torch.manual_seed(train_config.seed)
    try:
        model = InstructionGraspModel(vocab=Vocab.load(vocab_path), backbone_config=backbone,
                                      head_config=head, projector_activation=activation)
    except ValueError as err:
        raise CliError(CONFIG_ERROR, str(err)) from err
    apply_adapters(model.backbone)
    try:
        datasets = load_training_data(model, args.data)
    except (FileNotFoundError, ValueError) as err:
        raise CliError(DATA_ERROR, str(err)) from err
    try:
        result = train(model, datasets, train_config, args.out)
    except RuntimeError as err:
        raise CliError(RUNTIME_ERROR, str(err)) from err
    print(f"trained {result.steps} steps; final checkpoint at {result.final_dir}")
    write_run_manifest(args.out, "train", raw, train_config.seed, started)
    return 0


# ---- eval / predict / report ----


def _parse_k_list(text: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as err:
        raise CliError(CONFIG_ERROR, f"--k must be comma-separated integers, got {text!r}") from err


def _cmd_eval(args: argparse.Namespace) -> int:
    started = _utc_now()
    check_manifest_absent(args.out)
    k_list = _parse_k_list(args.k)
    model, extra, kind = load_any_model(args.model)
    try:
        config = EvalConfig(
            k_list=k_list,
            width_max=float(extra.get("width_max", 150.0)),
            min_peak_dist=args.min_peak_dist,
            smoothing_sigma=args.smoothing_sigma,
            max_new=args.max_new,
        )
    except ValueError as err:
        raise CliError(CONFIG_ERROR, str(err)) from err
    try:
        samples = list(load_samples(args.data, args.split))
    except (FileNotFoundError, ValueError) as err:
        raise CliError(DATA_ERROR, str(err)) from err
    if not samples:
        raise CliError(DATA_ERROR, f"no {args.split} samples under {args.data}")
    report = evaluate_model(model, samples, config)
    jsonl_path, _ = save_report(report, args.out)
    print(format_report_table(report), end="")
    print(f"report written to {jsonl_path}")
    write_run_manifest(
        args.out, "eval",
        {"model": args.model, "data": args.data, "split": args.split, "k": list(k_list), "model_kind": kind},
        None, started,
    )
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    model, extra, kind = load_any_model(args.model)
    if not os.path.isfile(args.image):
        raise CliError(DATA_ERROR, f"missing image file: {args.image}")
    in_channels = model.head.config.in_channels
    if in_channels == 4 and args.depth is None:
        raise CliError(CONFIG_ERROR, "this model takes RGB-D input; pass --depth")
    cache = ImageCache()
    image = cache.get(args.image)
    head_image = cache.get(args.image, args.depth) if in_channels == 4 else image
    width_max = float(extra.get("width_max", 150.0))
    try:
        if kind == MODEL_KIND:
            result = model.infer(image, args.instruction, head_image=head_image, max_new=args.max_new)
            maps = result.maps
            if result.target_name:
                print(f"target: {result.target_name}")
            if result.failure:
                print(f"target extraction failed ({result.failure}); detecting without text")
        elif kind == CLIP_KIND:
            maps = model.predict_maps(head_image, args.instruction)
        else:
            maps = model.predict_maps(head_image)
        poses = decode_grasps(maps, k=args.k, width_max=width_max)
    except (RuntimeError, ValueError) as err:
        raise CliError(RUNTIME_ERROR, str(err)) from err
    render_annotated(image, poses, out_path=args.out)
    for pose in poses:
        print(f"x={pose.x:.1f} y={pose.y:.1f} theta={pose.theta:.3f} width={pose.width:.1f} q={pose.quality:.3f}")
    print(f"annotated image written to {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        report = read_report(args.dir)
    except FileNotFoundError as err:
        raise CliError(DATA_ERROR, str(err)) from err
    print(format_report_table(report), end="")
    return 0


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langrasp", description="Language-conditioned grasp detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="build or import grasp datasets")
    dsub = dataset.add_subparsers(dest="dataset_command", required=True)

    build = dsub.add_parser("build", help="generate a synthetic tabletop dataset")
    build.add_argument("--out", required=True, help="output dataset directory")
    build.add_argument("--scenes", type=int, default=200)
    build.add_argument("--seed", type=int, default=7)
    build.add_argument("--image-size", type=int, default=96)
    build.add_argument("--min-objects", type=int, default=2)
    build.add_argument("--max-objects", type=int, default=4)
    build.set_defaults(func=_cmd_dataset_build)

    imp = dsub.add_parser("import-graspnet", help="convert an annotated scene tree in place")
    imp.add_argument("--root", required=True, help="tree with scenes/<id>/{rgb.png,camera.json,objects/}")
    imp.add_argument("--score-cutoff", type=float, default=0.5)
    imp.add_argument("--jaw-ratio", type=float, default=0.5)
    imp.set_defaults(func=_cmd_dataset_import)

    gen = dsub.add_parser("gen-instructions", help="generate implicit instructions per target description")
    gen.add_argument("--descriptions", required=True, help='jsonl file: {"object": "name: ...", "parts": [...]}')
    gen.add_argument("--out", required=True, help="output jsonl file")
    gen.add_argument("--llm-endpoint", default=None, help="completion endpoint; omit for templates only")
    gen.add_argument("--per-kind", type=int, default=5)
    gen.set_defaults(func=_cmd_dataset_gen)

    tr = sub.add_parser("train", help="train the instruction-conditioned model")
    tr.add_argument("--config", required=True, help="key = value config file")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="rectangle-metric evaluation of a checkpoint")
    ev.add_argument("--model", required=True, help="checkpoint directory")
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--out", required=True, help="report output directory")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.add_argument("--k", default="1,3", help="comma-separated R@k ranks")
    ev.add_argument("--max-new", type=int, default=24)
    ev.add_argument("--min-peak-dist", type=float, default=8.0)
    ev.add_argument("--smoothing-sigma", type=float, default=2.0)
    ev.set_defaults(func=_cmd_eval)

    pr = sub.add_parser("predict", help="annotate one image with predicted grasps")
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--instruction", required=True)
    pr.add_argument("--out", required=True, help="annotated PNG path")
    pr.add_argument("--depth", default=None)
    pr.add_argument("--k", type=int, default=1)
    pr.add_argument("--max-new", type=int, default=24)
    pr.set_defaults(func=_cmd_predict)

    rep = sub.add_parser("report", help="print the table for a stored evaluation report")
    rep.add_argument("--dir", required=True, help="directory holding report.jsonl")
    rep.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except Exception as err:  # structured exit codes even for unplanned failures
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
