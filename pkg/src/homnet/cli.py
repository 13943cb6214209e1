"""Command-line pipeline: synth -> pretrain -> finetune -> eval/predict.

Structured results go to stdout as JSON; logs go to stderr. Every command
drops an atomically written run_manifest.json next to its outputs with the
resolved configuration, seeds, paths and timings, so a run can be reproduced
from the manifest alone. Exit codes: 2 usage, 3 data, 4 numeric, 5 io.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset, save_dataset
from .errors import EXIT_CODES, HomnetError, UsageError
from .evaluation import evaluate_model
from .model import ModelConfig, gradcheck_model
from .plotting import save_score_histogram, save_training_curves
from .synth import CorpusConfig, build_pretrain_corpus, make_templates
from .training import (
    Checkpoint,
    TrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.homn"


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config file {path}: expected a JSON object")
    return obj


def _model_config(args, file_cfg: dict) -> ModelConfig:
    cfg = ModelConfig(**file_cfg.get("model", {}))
    overrides = {}
    if getattr(args, "attn_norm", None) is not None:
        overrides["attn_norm"] = args.attn_norm
    return cfg.override(**overrides) if overrides else cfg


def _train_config(args, file_cfg: dict) -> TrainConfig:
    base = dict(file_cfg.get("train", {}))
    for flag, key in (("lr", "lr"), ("batch_size", "batch_size"), ("patience", "patience"),
                      ("max_epochs", "max_epochs"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if getattr(args, "freeze", None) is not None:
        base["freeze_set"] = tuple(s for s in args.freeze.split(",") if s)
    if "freeze_set" in base and base["freeze_set"] is not None:
        base["freeze_set"] = tuple(base["freeze_set"])
    return TrainConfig(**base)


def _write_manifest(out_dir: Path, command: str, payload: dict) -> None:
    manifest = {"command": command, "tool_version": __version__, **payload}
    path = out_dir / "run_manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    os.replace(tmp, path)


def _write_history(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auc"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_auc"])])


def _save_training_outputs(ckpt: Checkpoint, out_dir: Path, command: str,
                           payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    save_checkpoint(ckpt, ckpt_path)
    history = ckpt.metadata.get("history", [])
    if history:
        _write_history(history, out_dir / "history.csv")
        save_training_curves(history, out_dir / "training_curves.png")
    _write_manifest(out_dir, command, payload)
    return ckpt_path


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    file_cfg = _read_config_file(args.config)
    base = dict(file_cfg.get("corpus", {}))
    for flag, key in (("bags", "n_subjects"), ("m", "m"), ("d", "d"),
                      ("abnormal_ratio", "abnormal_ratio"),
                      ("mixed_type_ratio", "mixed_type_ratio"),
                      ("sigma", "sigma"), ("warp_amp", "warp_amp"),
                      ("val_fraction", "val_fraction")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if "n_subjects" not in base:
        raise UsageError("--bags is required (or corpus.n_subjects in --config)")
    for ratio in ("abnormal_ratio", "mixed_type_ratio", "val_fraction"):
        if ratio in base and not (0.0 <= base[ratio] <= 1.0):
            raise UsageError(f"--{ratio.replace('_', '-')} must be in [0, 1]")
    config = CorpusConfig(**base)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    templates, table = make_templates(args.seed)
    build = build_pretrain_corpus(templates, table, config, args.seed)
    train_path = out_dir / "train.jsonl"
    val_path = out_dir / "val.jsonl"
    save_dataset(build.train, train_path)
    save_dataset(build.val, val_path)
    sidecar = {
        "seed": args.seed,
        "config": config.to_dict(),
        "kind_counts": build.kind_counts,
        "n_train": len(build.train),
        "n_val": len(build.val),
    }
    (out_dir / "manifest.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    elapsed = time.perf_counter() - t0
    _write_manifest(out_dir, "synth", {
        "seed": args.seed,
        "config": {"corpus": config.to_dict()},
        "outputs": {"train": str(train_path), "val": str(val_path)},
        "timings": {"total_s": elapsed},
    })
    print(json.dumps({"train": str(train_path), "val": str(val_path),
                      "n_train": len(build.train), "n_val": len(build.val),
                      "kind_counts": build.kind_counts}))
    return 0


def cmd_pretrain(args) -> int:
    t0 = time.perf_counter()
    file_cfg = _read_config_file(args.config)
    cfg = _model_config(args, file_cfg)
    tcfg = _train_config(args, file_cfg)
    train_records = load_dataset(args.data)
    val_records = load_dataset(args.val)
    ckpt = pretrain(train_records, val_records, cfg, tcfg)
    elapsed = time.perf_counter() - t0
    ckpt_path = _save_training_outputs(ckpt, Path(args.out), "pretrain", {
        "seed": tcfg.seed,
        "config": {"model": cfg.to_dict(), "train": _tcfg_dict(tcfg)},
        "inputs": {"data": str(args.data), "val": str(args.val)},
        "outputs": {"checkpoint": str(Path(args.out) / CHECKPOINT_NAME)},
        "timings": {"total_s": elapsed},
    })
    print(json.dumps({"checkpoint": str(ckpt_path),
                      "best_val_auc": ckpt.metadata.get("best_val_auc"),
                      "epoch": ckpt.metadata.get("epoch")}))
    return 0


def cmd_finetune(args) -> int:
    t0 = time.perf_counter()
    file_cfg = _read_config_file(args.config)
    tcfg = _train_config(args, file_cfg)
    ckpt_in = load_checkpoint(args.ckpt)
    site_records = load_dataset(args.data)
    ckpt = finetune(ckpt_in, site_records, tcfg)
    elapsed = time.perf_counter() - t0
    ckpt_path = _save_training_outputs(ckpt, Path(args.out), "finetune", {
        "seed": tcfg.seed,
        "config": {"model": ckpt.config.to_dict(), "train": _tcfg_dict(tcfg)},
        "inputs": {"ckpt": str(args.ckpt), "data": str(args.data)},
        "outputs": {"checkpoint": str(Path(args.out) / CHECKPOINT_NAME)},
        "timings": {"total_s": elapsed},
    })
    print(json.dumps({"checkpoint": str(ckpt_path),
                      "best_val_auc": ckpt.metadata.get("best_val_auc"),
                      "epoch": ckpt.metadata.get("epoch")}))
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.ckpt)
    records = load_dataset(args.data)
    state = ckpt.state(np.float32)
    report = evaluate_model(records, state, ckpt.config)
    elapsed = time.perf_counter() - t0
    if args.out is None:
        print(report.to_json())
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    report.write_csv(out_dir / "scores.csv")
    save_score_histogram(report, out_dir / "score_histogram.png")
    _write_manifest(out_dir, "eval", {
        "inputs": {"ckpt": str(args.ckpt), "data": str(args.data)},
        "outputs": {"report": str(out_dir / "report.json"),
                    "scores": str(out_dir / "scores.csv"),
                    "histogram": str(out_dir / "score_histogram.png")},
        "timings": {"total_s": elapsed},
    })
    print(report.to_json(include_records=False))
    return 0


def cmd_predict(args) -> int:
    from .model import predict_bags  # local import keeps startup lean

    ckpt = load_checkpoint(args.ckpt)
    records = load_dataset(args.data)
    state = ckpt.state(np.float32)
    preds = predict_bags(records, state, ckpt.config)
    for rec, pred in zip(records, preds):
        print(json.dumps({"record_id": rec.record_id, "y_hat": pred.y_hat,
                          "alphas": [float(a) for a in pred.alphas]}))
    return 0


def cmd_gradcheck(args) -> int:
    file_cfg = _read_config_file(args.config)
    model_section = file_cfg.get("model")
    if model_section:
        cfg = ModelConfig(**model_section)
    else:
        cfg = ModelConfig(d=32, k_mg=8, l_r=8, n_h=2, hom_layers=2, l_h=8, m=2)
    report = gradcheck_model(cfg, seed=args.seed, h=args.h, tol=args.tol)
    print(json.dumps({"passed": report.passed, "n_checked": report.n_checked,
                      "max_rel_err": report.max_rel_err, "tol": report.tol}))
    if not report.passed:
        logger.error("gradcheck failed: %s", report.summary())
        return EXIT_CODES["numeric"]
    return 0


def _tcfg_dict(tcfg: TrainConfig) -> dict:
    return {
        "lr": tcfg.lr, "batch_size": tcfg.batch_size, "patience": tcfg.patience,
        "max_epochs": tcfg.max_epochs, "seed": tcfg.seed,
        "freeze_set": list(tcfg.freeze_set) if tcfg.freeze_set is not None else None,
    }


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homnet",
        description="Homologous-pair structural abnormality detection pipeline",
    )
    parser.add_argument("--version", action="version", version=f"homnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic pretraining corpus")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--config", help="JSON config file ({'corpus': {...}})")
    synth.add_argument("--bags", type=int, help="total bags (one per synthetic subject)")
    synth.add_argument("--m", type=int, help="pairs per bag")
    synth.add_argument("--d", type=int, help="padded sequence length")
    synth.add_argument("--abnormal-ratio", dest="abnormal_ratio", type=float)
    synth.add_argument("--mixed-type-ratio", dest="mixed_type_ratio", type=float)
    synth.add_argument("--sigma", type=float, help="additive gray-noise std")
    synth.add_argument("--warp-amp", dest="warp_amp", type=float)
    synth.add_argument("--val-fraction", dest="val_fraction", type=float)
    synth.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON config file ({'model': .., 'train': ..})")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--freeze", help="comma-separated tensor-name prefixes")

    pre = sub.add_parser("pretrain", help="self-supervised pretraining")
    pre.add_argument("--data", required=True, help="training JSONL")
    pre.add_argument("--val", required=True, help="validation JSONL")
    pre.add_argument("--attn-norm", dest="attn_norm", choices=["softmax", "raw_eps"])
    add_train_flags(pre)
    pre.set_defaults(func=cmd_pretrain)

    fine = sub.add_parser("finetune", help="fine-tune a checkpoint on site data")
    fine.add_argument("--ckpt", required=True)
    fine.add_argument("--data", required=True, help="site JSONL (split 1:4 by subject)")
    add_train_flags(fine)
    fine.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on labeled bags")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", help="directory for report.json/scores.csv/figure")
    ev.set_defaults(func=cmd_eval)

    pred = sub.add_parser("predict", help="print y_hat and pair weights per bag")
    pred.add_argument("--ckpt", required=True)
    pred.add_argument("--data", required=True)
    pred.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--config", help="JSON config file with a small 'model' section")
    gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except HomnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
