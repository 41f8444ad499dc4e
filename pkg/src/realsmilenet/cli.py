"""Command-line entry point: ``realsmilenet <subcommand> [flags]``.

Exit codes: 0 success, 1 validation or data error (including unknown
flags), 2 internal or numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FoldPlan, load_frames, load_manifest, make_folds
from .exceptions import ConfigError, DataError, NumericalError, RealSmileError, StateError
from .model import ModelConfig, forward_batch, positive_probability
from .synth import SynthConfig, synth_generate
from .tensor import no_grad
from .training import (
    TrainConfig,
    VideoCache,
    evaluate,
    export_embeddings,
    predict_label,
    train,
    write_metrics,
    write_scores,
)

logger = logging.getLogger("realsmilenet")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.rsmn"
METRICS_NAME = "metrics.csv"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with exit code 1 for usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------------------
# configuration


_MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__}
_TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__}


def load_config_file(path: Optional[str]) -> Tuple[dict, dict]:
    """Read a JSON config into (model overrides, train overrides).

    Accepts either ``{"model": {...}, "train": {...}}`` or a flat object whose
    keys are ModelConfig/TrainConfig field names (``resolution`` feeds both).
    """
    if not path:
        return {}, {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    if set(raw) <= {"model", "train"} and raw:
        return dict(raw.get("model", {})), dict(raw.get("train", {}))
    unknown = set(raw) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = {k: v for k, v in raw.items() if k in _MODEL_KEYS}
    train_ = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    return model, train_


def build_configs(args) -> Tuple[ModelConfig, TrainConfig]:
    """Defaults < config file < flags."""
    model, train_ = load_config_file(getattr(args, "config", None))
    if "resolution" in model and "resolution" not in train_:
        train_["resolution"] = model["resolution"]
    if "resolution" in train_ and "resolution" not in model:
        model["resolution"] = train_["resolution"]
    flags = {
        "epochs": args.epochs,
        "batch_videos": args.batch_videos,
        "lr": args.lr,
        "weighting": args.weighting,
        "target_fps": args.fps,
        "seed": args.seed,
    }
    train_.update({k: v for k, v in flags.items() if v is not None})
    if args.resolution is not None:
        model["resolution"] = train_["resolution"] = args.resolution
    if args.no_tsa:
        model["use_tsa"] = False
    if args.head is not None:
        model["head"] = args.head
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train_)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of ModelConfig/TrainConfig fields; flags override it")
    p.add_argument("--seed", type=int, default=None, help="seed for init, shuffling and dropout")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-videos", type=int, default=None, dest="batch_videos")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weighting", choices=("auto", "proportion", "unit"), default=None)
    p.add_argument("--fps", type=float, default=None, help="target sampling rate (frames per second)")
    p.add_argument("--resolution", type=int, default=None, help="frame side length after resizing")
    p.add_argument("--no-tsa", action="store_true", help="drop the temporal attention block")
    p.add_argument("--head", choices=("sigmoid", "softmax"), default=None)


def _split(manifest, folds_path: Optional[str], fold: Optional[int], which: str):
    if folds_path is None:
        if which != "all":
            raise DataError(f"--split {which} needs --folds and --fold")
        return manifest
    if fold is None:
        raise DataError("--folds needs --fold")
    plan = FoldPlan.load(folds_path)
    train_split, test_split = plan.split(manifest, fold)
    return {"train": train_split, "test": test_split, "all": manifest}[which]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_subjects=args.subjects,
        videos_per_subject=args.videos_per_subject,
        resolution=args.resolution,
        source_fps=args.fps,
        duration=tuple(args.duration),
        noise_level=args.noise,
        seed=args.seed,
        channels=args.channels,
    )
    manifest = synth_generate(cfg, args.out)
    spont, posed = manifest.counts
    print(f"manifest={Path(args.out) / 'manifest.json'}")
    print(f"videos={len(manifest)} spontaneous={spont} posed={posed} subjects={len(manifest.subjects)}")
    return EXIT_OK


def cmd_folds(args) -> int:
    manifest = load_manifest(args.manifest, require_frames=False)
    plan = make_folds(manifest, args.k, args.seed)
    plan.save(args.out)
    for f in range(plan.k):
        print(f"fold={f} subjects={len(plan.test_subjects(f))}")
    return EXIT_OK


def cmd_train(args) -> int:
    mc, tc = build_configs(args)
    manifest = load_manifest(args.manifest)
    plan = FoldPlan.load(args.folds)
    out = Path(args.out)

    def progress(row):
        logger.info("epoch %d %s loss=%.4f accuracy=%.4f", row.epoch, row.split, row.loss, row.accuracy)

    ckpt = train(manifest, plan, args.fold, mc, tc, progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_metrics(ckpt.metrics, out / METRICS_NAME)
    last = [r for r in ckpt.metrics if r["epoch"] == tc.epochs - 1]
    for r in last:
        print(f"{r['split']}_accuracy={r['accuracy']:.4f}")
    print(f"checkpoint={out / CHECKPOINT_NAME}")
    return EXIT_OK


def _check_against(ckpt, args) -> None:
    if args.resolution is not None and args.resolution != ckpt.model_config.resolution:
        raise ConfigError(
            f"--resolution {args.resolution} does not match the checkpoint's {ckpt.model_config.resolution}"
        )
    if args.config:
        model, _ = load_config_file(args.config)
        for key, value in model.items():
            have = ckpt.model_config.to_dict()[key]
            if (list(value) if isinstance(value, (list, tuple)) else value) != have:
                raise ConfigError(f"config {key}={value!r} does not match the checkpoint's {have!r}")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _check_against(ckpt, args)
    manifest = load_manifest(args.manifest)
    split = _split(manifest, args.folds, args.fold, args.split)
    result = evaluate(ckpt, split)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_scores(result, args.out)
    print(f"accuracy={result.accuracy:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.crop is not None and len(args.crop) != 4:
        raise DataError(f"--crop needs four integers x,y,w,h, got {args.crop}")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    video = load_frames(
        args.frames, args.source_fps, ckpt.train_config.target_fps, cfg.resolution, cfg.in_channels, args.crop
    )
    with no_grad():
        out = forward_batch([video], ckpt.params, cfg, "eval")
    score = float(positive_probability(out.score.data, cfg)[0])
    label = predict_label(score) if cfg.head == "sigmoid" else int(np.argmax(out.score.data[0]))
    print(f"score={score!r} label={label}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.precision, args.trials, args.seed, include_model=not args.skip_model)
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    print(f"summary: {len(results) - len(failed)}/{len(results)} passed")
    return EXIT_INTERNAL if failed else EXIT_OK


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    split = _split(manifest, args.folds, args.fold, args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(ckpt, split, args.out)
    print(f"rows={len(split)} out={args.out}")
    return EXIT_OK


def _sweep_cell(index, resolution, fps, manifest, plan, args, cache) -> Tuple[int, float, str]:
    args_cell = argparse.Namespace(**vars(args))
    args_cell.resolution = resolution
    args_cell.fps = fps
    args_cell.seed = (args.seed or 0) + index
    try:
        mc, tc = build_configs(args_cell)
        ckpt = train(manifest, plan, args.fold, mc, tc, cache=cache)
        _, test_split = plan.split(manifest, args.fold)
        return index, evaluate(ckpt, test_split, cache).accuracy, ""
    except Exception as exc:  # a failed cell must not stop the sweep
        return index, float("nan"), f"{type(exc).__name__}: {exc}"


def worker_count() -> int:
    raw = os.environ.get("RSMN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RSMN_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"RSMN_THREADS must be >= 1, got {n}")
    return n


def cmd_sweep(args) -> int:
    manifest = load_manifest(args.manifest)
    plan = FoldPlan.load(args.folds)
    plan.split(manifest, args.fold)  # validate the fold index up front
    cells = [(r, f) for r in sorted(args.resolutions) for f in sorted(args.fps_list)]
    cache = VideoCache()
    workers = min(worker_count(), len(cells))
    if workers == 1:
        results = [_sweep_cell(i, r, f, manifest, plan, args, cache) for i, (r, f) in enumerate(cells)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            futures = [pool.submit(_sweep_cell, i, r, f, manifest, plan, args, cache) for i, (r, f) in enumerate(cells)]
            results = [fut.result() for fut in futures]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    failures = 0
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["resolution", "fps", "accuracy"])
        for index, acc, err in results:
            r, f = cells[index]
            fps_text = f"{f:g}"
            if err:
                failures += 1
                print(f"cell resolution={r} fps={fps_text} failed: {err}", file=sys.stderr)
                w.writerow([r, fps_text, "nan"])
            else:
                w.writerow([r, fps_text, f"{acc:.4f}"])
                print(f"resolution={r} fps={fps_text} accuracy={acc:.4f}")
    print(f"rows={len(cells)} failed={failures} out={out}")
    return EXIT_USER if failures else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    parser = Parser(prog="realsmilenet", description="Spontaneous vs posed smile classification from video frames.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic smile dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--videos-per-subject", type=int, default=4, dest="videos_per_subject")
    p.add_argument("--fps", type=float, default=25.0, help="source frame rate of the rendered clips")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--duration", type=_float_list, default=[1.0, 1.6], help="clip length range in seconds, lo,hi")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("folds", help="plan subject-disjoint folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train on all folds but one")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds")
    p.add_argument("--fold", type=int)
    p.add_argument("--split", choices=("test", "train", "all"), default=None)
    p.add_argument("--config", help="optional config that must agree with the checkpoint")
    p.add_argument("--resolution", type=int, default=None, help="optional resolution that must agree with the checkpoint")
    p.add_argument("--out", help="per-video scores CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one frame directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--source-fps", type=float, required=True, dest="source_fps")
    p.add_argument("--crop", type=_int_list, default=None, help="face box x,y,w,h")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the micro model")
    p.add_argument("--precision", choices=("double", "single"), default="double")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true", dest="skip_model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="write per-video head embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds")
    p.add_argument("--fold", type=int)
    p.add_argument("--split", choices=("test", "train", "all"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="resolution x fps grid on one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--resolutions", type=_int_list, default=[48, 64, 96, 112])
    p.add_argument("--fps-list", type=_float_list, default=[1, 3, 5, 7], dest="fps_list")
    p.add_argument("--out", required=True, help="grid CSV path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _error_code(exc: BaseException) -> int:
    if isinstance(exc, (NumericalError, StateError)):
        return EXIT_INTERNAL
    if isinstance(exc, (RealSmileError, OSError)):
        return EXIT_USER
    return EXIT_INTERNAL


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command in ("eval", "export") and args.split is None:
        args.split = "test" if args.folds else "all"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _error_code(exc)
        kind = "error" if code == EXIT_USER else "internal error"
        print(f"realsmilenet {args.command}: {kind}: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL and args.verbose:
            logger.exception("traceback")
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
