"""Command-line entry point: ``faprompt {train,eval,score,export-prompt-scores,synth}``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import BackboneConfig, build_backbone
from .checkpoint import Checkpoint
from .data import DatasetHandle, Sample, load_dataset, read_image, resize_sample, synth_dataset, write_dataset
from .errors import ConfigError, FAPromptError, IngestionError, UndefinedMetricError, ValidationError
from .inference import evaluate, predict, prompt_wise_scores
from .training import FAPrompt, TrainConfig, train

log = logging.getLogger("faprompt")

BACKBONE_KEYS = {"kind", "embedding_dim", "token_dim", "deep_prompt_depth", "deep_prompt_length", "text_layers", "patch_size"}
SYNTH_DEFAULTS = {"n_train": 200, "n_test": 80, "size": 64, "anomaly_fraction": 0.5}
EVAL_DEFAULTS = {"fpr_limit": 0.3, "per_image_csv": True, "batch_size": 16}
VALIDATION_ERRORS = (ValidationError, ConfigError, IngestionError, UndefinedMetricError)


def _reject_unknown(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


@dataclass
class RunConfig:
    backbone: BackboneConfig
    train: TrainConfig
    data: dict
    eval: dict
    output_dir: Path

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        _reject_unknown("<root>", doc, {"backbone", "train", "data", "eval", "output_dir"})
        train_cfg = TrainConfig.from_dict(doc.get("train", {}))
        bdoc = doc.get("backbone", {})
        _reject_unknown("backbone", bdoc, BACKBONE_KEYS)
        # one seed drives backbone weights, data synthesis, init and shuffling
        backbone = BackboneConfig(**bdoc, input_size=train_cfg.input_size, seed=train_cfg.seed)

        ddoc = doc.get("data", {})
        _reject_unknown("data", ddoc, {"root", "test_root", "synth"})
        root, test_root, synth = ddoc.get("root"), ddoc.get("test_root"), ddoc.get("synth")
        if root is not None and synth is not None:
            raise ConfigError("data.root and data.synth are mutually exclusive")
        if test_root is not None and root is None:
            raise ConfigError("data.test_root requires data.root")
        data = {"root": root, "test_root": test_root, "synth": None}
        if root is None:
            synth = synth or {}
            _reject_unknown("data.synth", synth, SYNTH_DEFAULTS)
            data["synth"] = {**SYNTH_DEFAULTS, **synth}

        edoc = doc.get("eval", {})
        _reject_unknown("eval", edoc, EVAL_DEFAULTS)
        output_dir = doc.get("output_dir")
        if not output_dir:
            raise ConfigError("output_dir is required")
        return cls(backbone, train_cfg, data, {**EVAL_DEFAULTS, **edoc}, Path(output_dir))

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        bdoc = {k: v for k, v in self.backbone.to_dict().items() if k in BACKBONE_KEYS}
        return {
            "backbone": bdoc,
            "train": self.train.to_dict(),
            "data": self.data,
            "eval": self.eval,
            "output_dir": str(self.output_dir),
        }

    def write_resolved(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "resolved-config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def datasets(self) -> tuple[DatasetHandle, DatasetHandle]:
        if self.data["root"] is not None:
            source = load_dataset(self.data["root"])
            target = load_dataset(self.data["test_root"]) if self.data["test_root"] else source
        else:
            source = target = synth_dataset(seed=self.train.seed, **self.data["synth"])
        return source.select("train"), target.select("test")


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.write_resolved()
    train_set, _ = cfg.datasets()
    if len(train_set) == 0:
        raise ValidationError("training split is empty")
    backbone = build_backbone(cfg.backbone)
    ckpt = train(cfg.train, train_set, backbone, log_path=cfg.output_dir / "train_log.jsonl")
    path = ckpt.save(cfg.output_dir / "checkpoint.fapk")
    print(path)
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    model = FAPrompt.from_checkpoint(Checkpoint.load(args.checkpoint))
    cfg.write_resolved()
    _, test_set = cfg.datasets()
    report, scores = evaluate(model, test_set, cfg.eval["fpr_limit"], cfg.eval["batch_size"])
    out = cfg.output_dir / "eval_report.json"
    out.write_text(report.to_json())
    if cfg.eval["per_image_csv"]:
        with open(cfg.output_dir / "per_image_scores.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "category", "label", "score"])
            for e, s in zip(test_set.entries, scores):
                writer.writerow([e.name, e.category, e.label, repr(float(s))])
    print(out)
    return 0


def _resize_map(anomaly_map: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if anomaly_map.shape == size:
        return anomaly_map
    t = torch.from_numpy(anomaly_map)[None, None]
    return torch.nn.functional.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def cmd_score(args) -> int:
    model = FAPrompt.from_checkpoint(Checkpoint.load(args.checkpoint))
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ValidationError(f"image {image_path} does not exist")
    image = read_image(image_path)
    sample = Sample(image, 0, np.zeros(image.shape[:2], np.uint8), "", "test", image_path.name)
    resized, _ = resize_sample(sample, model.config.input_size)
    sigma = model.config.sigma if args.sigma is None else args.sigma
    scores, maps = predict(model, torch.from_numpy(resized)[None], sigma=sigma if sigma > 0 else None)
    amap = np.clip(_resize_map(maps[0], image.shape[:2]), 0.0, 1.0)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{image_path.stem}_anomaly_map.png"
    Image.fromarray(np.round(amap * 65535).astype(np.uint16)).save(png)
    meta = {
        "image": str(image_path),
        "score": float(scores[0]),
        "height": int(amap.shape[0]),
        "width": int(amap.shape[1]),
        "sigma": float(sigma),
        "map": png.name,
    }
    (out_dir / f"{image_path.stem}_score.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(png)
    return 0


def cmd_export_prompt_scores(args) -> int:
    model = FAPrompt.from_checkpoint(Checkpoint.load(args.checkpoint))
    dataset = load_dataset(args.data).select(args.split)
    if len(dataset) == 0:
        raise ValidationError(f"no {args.split} images under {args.data}")
    table = prompt_wise_scores(model, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "category", "label"] + [f"prompt_{k}" for k in range(table.shape[1])])
        for e, row in zip(dataset.entries, table):
            writer.writerow([e.name, e.category, e.label] + [repr(float(v)) for v in row])
    print(out)
    return 0


def cmd_synth(args) -> int:
    handle = synth_dataset(args.seed, args.n_train, args.n_test, args.size, args.anomaly_fraction)
    print(write_dataset(handle, args.out))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="faprompt", description="Zero-shot anomaly detection with compound abnormality prompts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="learn prompts and prior network, write checkpoint + log")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="anomaly map (16-bit PNG) and score (JSON) for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--sigma", type=float, default=None, help="smoothing sigma; 0 disables, default from checkpoint")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-prompt-scores", help="per-image max patch score of each abnormality prompt (CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", default="prompt_scores.csv")
    p.set_defaults(func=cmd_export_prompt_scores)

    p = sub.add_parser("synth", help="write a synthetic dataset in MVTec layout")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=SYNTH_DEFAULTS["n_train"])
    p.add_argument("--n-test", type=int, default=SYNTH_DEFAULTS["n_test"])
    p.add_argument("--size", type=int, default=SYNTH_DEFAULTS["size"])
    p.add_argument("--anomaly-fraction", type=float, default=SYNTH_DEFAULTS["anomaly_fraction"])
    p.set_defaults(func=cmd_synth)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("FAPROMPT_LOG", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING, "warning": logging.WARNING}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (FAPromptError, RuntimeError, OSError) as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


dispatch = main

if __name__ == "__main__":
    sys.exit(main())
