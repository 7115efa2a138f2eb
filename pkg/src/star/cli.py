"""``star`` command line: synth, train, infer, eval, check.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 non-finite loss,
5 checkpoint mismatch, 6 schema mismatch, 7 self-check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks
from .config import ConfigError, RunConfig, load_config
from .dataio import MANIFEST_NAME, DataError, load_features, save_features, synthesize_dataset
from .engine import OPS, inject_fault
from .evalkit import SchemaError, action_density, mean_ap, read_detections, write_detections
from .model import CheckpointError
from .pipeline import NonFiniteLoss, TrainState, fresh_state, infer, train, write_loss_row

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_CHECKPOINT, EXIT_SCHEMA, EXIT_CHECK = 0, 2, 3, 4, 5, 6, 7
FAULT_ENV = "STAR_INJECT_GRAD_FAULT"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"star: {msg}", file=sys.stderr)


def _manifest(cfg: RunConfig) -> Path:
    return Path(cfg.data_dir) / MANIFEST_NAME


def _load_split(cfg: RunConfig, split: str):
    try:
        videos = load_features(_manifest(cfg), split=split)
    except (DataError, OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load {split} data from {cfg.data_dir}: {exc}") from None
    if not videos:
        raise CliError(EXIT_IO, f"no {split} videos in {_manifest(cfg)}")
    return videos


def _check_data_dims(cfg: RunConfig, videos) -> None:
    v = videos[0]
    K = next(iter(v.features.values())).shape[1]
    if (v.N, K) != (cfg.dims.N, cfg.dims.K):
        raise CliError(EXIT_CONFIG, f"data has N={v.N}, K={K} but config says "
                                    f"synth.N={cfg.dims.N}, synth.K={cfg.dims.K}")


def _load_state(path: Path, cfg: RunConfig) -> TrainState:
    try:
        state = TrainState.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from None
    except (CheckpointError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint {path}: {exc}") from None
    if state.dims != cfg.dims:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint {path} has dims {state.dims}, "
                                        f"config expects {cfg.dims}")
    return state


def cmd_synth(cfg: RunConfig) -> int:
    ds = synthesize_dataset(cfg.synth)
    try:
        manifest = save_features(ds.train + ds.test, cfg.data_dir)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {cfg.data_dir}: {exc}") from None
    print(manifest)
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    videos = _load_split(cfg, "train")
    _check_data_dims(cfg, videos)
    ckpt = Path(cfg.checkpoint)
    out = Path(cfg.out_dir)
    loss_csv = out / "loss.csv"
    try:
        out.mkdir(parents=True, exist_ok=True)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        if resume:
            state = _load_state(ckpt, cfg)
        else:
            state = fresh_state(cfg.dims, cfg.seed)
            loss_csv.unlink(missing_ok=True)
        train(videos, state, cfg.hp, cfg.max_steps, seed=cfg.seed, opts=cfg.model,
              on_step=lambda step, br: write_loss_row(loss_csv, step, br),
              checkpoint=ckpt, checkpoint_every=cfg.checkpoint_every)
        if state.step == cfg.max_steps and not ckpt.exists():
            state.save(ckpt)
    except NonFiniteLoss as exc:
        raise CliError(EXIT_NONFINITE, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"training I/O failure: {exc}") from None
    print(ckpt)
    return EXIT_OK


def cmd_infer(cfg: RunConfig, signal: str = "attended") -> int:
    videos = _load_split(cfg, "test")
    _check_data_dims(cfg, videos)
    state = _load_state(Path(cfg.checkpoint), cfg)
    rng = np.random.default_rng([cfg.seed, 7]) if signal == "random" else None
    results = infer(videos, state.params, lam=cfg.hp.lam, thresholds=cfg.thresholds,
                    nms_iou=cfg.nms_iou, opts=cfg.model, signal=signal, rng=rng)
    out = Path(cfg.out_dir)
    dets = [d for r in results for d in r.detections]
    preds = {r.video_id: {"labels": r.labels, "classes": r.predicted_classes,
                          "ram": r.rams, "truncated": r.truncated} for r in results}
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_detections(out / "detections.csv", dets)
        (out / "predictions.json").write_text(json.dumps(preds, indent=1, sort_keys=True))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write results to {out}: {exc}") from None
    print(out / "detections.csv")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, detections: str | None = None) -> int:
    path = Path(detections) if detections else Path(cfg.out_dir) / "detections.csv"
    try:
        dets = read_detections(path)
    except SchemaError as exc:
        raise CliError(EXIT_SCHEMA, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read detections {path}: {exc}") from None
    videos = _load_split(cfg, "test")
    gts = [g for v in videos for g in v.annotation.instances]
    dens = {v.id: action_density(v.annotation.instances, v.duration) for v in videos}
    try:
        report = mean_ap(dets, gts, cfg.iou_thresholds, dens)
    except ValueError as exc:
        raise CliError(EXIT_SCHEMA, f"cannot evaluate: {exc}") from None
    try:
        report.write(cfg.out_dir)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report to {cfg.out_dir}: {exc}") from None
    for t in report.thresholds:
        print(f"mAP@{t:g}\t{report.map[t]:.4f}")
    print(f"Ave-mAP\t{report.ave_map:.4f}")
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    faulty = [op.strip() for op in os.environ.get(FAULT_ENV, "").split(",") if op.strip()]
    unknown = sorted(set(faulty) - set(OPS))
    if unknown:
        raise CliError(EXIT_CONFIG, f"{FAULT_ENV} names unknown ops {unknown}")
    with inject_fault(*faulty):
        results = checks.run_all(cfg.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        _err(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint")
    common.add_argument("--steps", type=int, help="train until this step count")
    common.add_argument("--thresholds", help="proposal thresholds, comma separated")
    common.add_argument("--nms-iou", type=float)
    common.add_argument("--lambda", dest="lam", type=float, help="RGB share when fusing attention")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. hp.lr=1e-3")
    p = argparse.ArgumentParser(prog="star", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the synthetic dataset")
    tr = sub.add_parser("train", parents=[common], help="train both streams")
    tr.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    inf = sub.add_parser("infer", parents=[common], help="detect actions in the test split")
    inf.add_argument("--signal", default="attended",
                     choices=["attended", "attention", "gradcam", "random"])
    ev = sub.add_parser("eval", parents=[common], help="score detections against annotations")
    ev.add_argument("--detections", help="detections CSV (default: <out>/detections.csv)")
    sub.add_parser("check", parents=[common], help="gradient and identity self-checks")
    return p


def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    if args.seed is not None:
        ov["seed"] = args.seed
        ov.setdefault("synth.seed", args.seed)
    for attr, key in (("data_dir", "data_dir"), ("out", "out_dir"), ("checkpoint", "checkpoint"),
                      ("steps", "max_steps"), ("thresholds", "thresholds"),
                      ("nms_iou", "nms_iou"), ("lam", "hp.lam")):
        val = getattr(args, attr)
        if val is not None:
            ov[key] = val
    return ov


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "infer":
            return cmd_infer(cfg, signal=args.signal)
        if args.command == "eval":
            return cmd_eval(cfg, args.detections)
        return cmd_check(cfg)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
