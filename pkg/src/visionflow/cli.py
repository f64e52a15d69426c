"""Command-line entry point: infer, train, verify, stats, gen-data.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 verification failure.
Config precedence is flags > config file > defaults.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

from .boxes import PipelineError, box_stats, load_box_file
from .config import ConfigError, RunConfig, load_config
from .datagen import (
    DatasetError,
    generate_dataset,
    generate_video_descriptor,
    load_dataset,
    save_dataset,
    small_training_config,
)
from .encoders import SceneDescriptor, generate_scene
from .pipeline import build_components, prepare_sample, run_image, run_video
from .training import (
    checkpoint_hash,
    curve_to_csv,
    load_checkpoint_state,
    mean_dataset_nll,
    restore_model,
    save_checkpoint,
    train_two_stage,
)
from .verify import SUITE_BUILDERS, run_suites

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def _parse_ids(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _config_from_args(args, base: dict | None = None) -> RunConfig:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    mapping = {
        "nms_iou": "boxes.nms_iou",
        "score_floor": "boxes.score_floor",
        "max_boxes": "boxes.max_boxes",
        "tags": "tags",
        "fusion_strategy": "fusion.strategy",
        "merge": "assembly.merge",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "class_agnostic", False):
        overrides["boxes.class_aware"] = False
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key] = value
    return load_config(getattr(args, "config", None), overrides, base=base)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="root seed (overrides config)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. roi.samples_per_bin=4")


def build_parser() -> _Parser:
    parser = _Parser(prog="visionflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="run the image/video pipeline and report")
    _add_common(p)
    p.add_argument("--input", help="scene or video descriptor JSON file")
    p.add_argument("--scene-seed", type=int, help="generate a scene instead of reading one")
    p.add_argument("--scene-objects", type=int, default=3)
    p.add_argument("--boxes-file", help="ingest detections from a box JSON file")
    p.add_argument("--text-ids", help="comma-separated prompt token ids")
    p.add_argument("--answer-ids", help="comma-separated answer ids to score")
    p.add_argument("--decode", type=int, default=0, help="greedy-decode N tokens")
    p.add_argument("--checkpoint", help="load trained parameters from this directory")
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--score-floor", type=float)
    p.add_argument("--max-boxes", type=int)
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--tags", help="synthetic | coco80 | file:PATH")
    p.add_argument("--fusion-strategy")
    p.add_argument("--merge")
    p.add_argument("--threads", type=int, default=1,
                   help="parallel per-frame encoding for video inputs")
    p.add_argument("--out", help="write the report JSON here (default stdout)")

    p = sub.add_parser("train", help="two-stage training on a dataset file")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True, help="checkpoint + loss curve directory")
    p.add_argument("--stage", choices=["both", "pretrain", "finetune"], default="both")
    p.add_argument("--small-config", action="store_true",
                   help="use the bundled desk-scale training config")

    p = sub.add_parser("verify", help="run the invariant battery")
    _add_common(p)
    p.add_argument("--suite", action="append",
                   help="suite name (repeatable): gradients nms roi tokens freeze determinism")
    p.add_argument("--fast", action="store_true", help="reduced trial counts")
    p.add_argument("--inject-fault", action="store_true",
                   help="perturb one analytic gradient; the battery must fail")

    p = sub.add_parser("stats", help="box-count histogram over a corpus")
    p.add_argument("--corpus", required=True, help="box JSON file, directory, or glob")
    p.add_argument("--csv", help="also write CSV here")

    p = sub.add_parser("gen-data", help="generate a synthetic training dataset or video")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--video", action="store_true", help="emit a video descriptor instead")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--small-config", action="store_true",
                   help="use the bundled desk-scale training config")
    return parser


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_infer(args) -> int:
    cfg = _config_from_args(args)
    components = build_components(cfg)
    if args.checkpoint:
        _, state = load_checkpoint_state(args.checkpoint)
        restore_model(components.model, state)
    text_ids = _parse_ids(args.text_ids) or [1, 2, 3, 4]
    answer_ids = _parse_ids(args.answer_ids) or None
    if args.input:
        with open(args.input, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if "frames" in payload:
            frames = [SceneDescriptor.from_dict(f) for f in payload["frames"]]
            report = run_video(cfg, frames, text_ids, answer_ids, args.decode, components,
                               threads=args.threads)
        else:
            scene = SceneDescriptor.from_dict(payload)
            report = run_image(cfg, scene, text_ids, answer_ids, args.decode,
                               components, args.boxes_file)
    else:
        scene = generate_scene(args.scene_seed if args.scene_seed is not None else cfg.seed,
                               n_objects=args.scene_objects)
        report = run_image(cfg, scene, text_ids, answer_ids, args.decode,
                           components, args.boxes_file)
    _emit(report, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    base = small_training_config(args.seed or 0).to_dict() if args.small_config else None
    cfg = _config_from_args(args, base=base)
    raw = load_dataset(args.dataset)
    components = build_components(cfg)
    prepared = [prepare_sample(components, s.scene, s.text_ids, s.answer_ids) for s in raw]
    model = components.model
    train_cfg = cfg.train
    if args.stage == "pretrain":
        train_cfg = _replace_steps(train_cfg, stage2=0)
    elif args.stage == "finetune":
        train_cfg = _replace_steps(train_cfg, stage1=0)
    initial = mean_dataset_nll(model, prepared, cfg.assembly.merge)
    curve = train_two_stage(model, prepared, train_cfg, merge=cfg.assembly.merge)
    final = mean_dataset_nll(model, prepared, cfg.assembly.merge)
    os.makedirs(args.out_dir, exist_ok=True)
    save_checkpoint(model, args.out_dir, stage=args.stage, seed=cfg.seed,
                    config_hash=cfg.config_hash())
    curve_path = os.path.join(args.out_dir, "loss_curve.csv")
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write(curve_to_csv(curve))
    summary = {
        "command": "train",
        "config_hash": cfg.config_hash(),
        "samples": len(prepared),
        "steps": len(curve),
        "initial_mean_nll": initial,
        "final_mean_nll": final,
        "checkpoint": args.out_dir,
        "checkpoint_hash": checkpoint_hash(args.out_dir),
        "loss_curve": curve_path,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _replace_steps(tc, stage1=None, stage2=None):
    import dataclasses
    updates = {}
    if stage1 is not None:
        updates["stage1_steps"] = stage1
    if stage2 is not None:
        updates["stage2_steps"] = stage2
    return dataclasses.replace(tc, **updates)


def cmd_verify(args) -> int:
    names = None
    if args.suite:
        names = []
        for item in args.suite:
            names.extend(s for s in item.split(",") if s)
        unknown = [n for n in names if n not in SUITE_BUILDERS]
        if unknown:
            raise UsageError(f"unknown suite(s) {unknown}; available: {sorted(SUITE_BUILDERS)}")
    results = run_suites(names, seed=args.seed or 0, fast=args.fast,
                         inject_fault=args.inject_fault)
    all_ok = True
    for suite in results:
        for check in suite.checks:
            status = "PASS" if check.passed else "FAIL"
            print(f"[{status}] {suite.name}/{check.name}: {check.detail}")
        all_ok &= suite.passed
    print(f"verify: {'all suites passed' if all_ok else 'FAILURES detected'}")
    return EXIT_OK if all_ok else EXIT_VERIFY


def cmd_stats(args) -> int:
    paths: list[str] = []
    if os.path.isdir(args.corpus):
        paths = sorted(glob.glob(os.path.join(args.corpus, "*.json")))
    elif os.path.exists(args.corpus):
        paths = [args.corpus]
    else:
        paths = sorted(glob.glob(args.corpus))
    if not paths:
        raise FileNotFoundError(f"no box files match {args.corpus!r}")
    sets = []
    for path in paths:
        sets.extend(load_box_file(path))
    hist = box_stats(sets)
    print(f"{'bin':>8}  count")
    for name, count in hist.items():
        print(f"{name:>8}  {count}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("bin,count\n")
            for name, count in hist.items():
                fh.write(f"{name},{count}\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    seed = args.seed or 0
    if args.video:
        payload = generate_video_descriptor(seed, n_frames=args.frames)
        _emit(payload, args.out)
        return EXIT_OK
    base = small_training_config(seed).to_dict() if args.small_config else None
    cfg = _config_from_args(args, base=base)
    samples = generate_dataset(cfg, n_samples=args.samples)
    save_dataset(samples, args.out, seed=cfg.seed)
    print(json.dumps({"command": "gen-data", "samples": len(samples), "out": args.out}))
    return EXIT_OK


COMMANDS = {
    "infer": cmd_infer,
    "train": cmd_train,
    "verify": cmd_verify,
    "stats": cmd_stats,
    "gen-data": cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError, DatasetError, ConfigError,
            PipelineError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
