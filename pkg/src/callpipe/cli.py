"""Command-line entry point: ``callpipe {train,finetune,infer,eval,sweep}``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

from .config import OverrideParseError, dump_text, load_config, parse_override

log = logging.getLogger("callpipe")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_config_dir() -> Path:
    local = Path("conf")
    if local.is_dir():
        return local
    return Path(str(resources.files("callpipe") / "conf"))


def _config_args(p: argparse.ArgumentParser, default_name: str | None = "runs/default") -> None:
    p.add_argument("--config-dir", type=Path, default=None,
                   help="configuration root (default: ./conf, else the packaged one)")
    p.add_argument("--config-name", "-cn", default=default_name, required=default_name is None,
                   help="run file, e.g. runs/default")
    p.add_argument("overrides", nargs="*", help="overrides such as data.batch_size=8 or optim=christoph")


def build_parser() -> Parser:
    parser = Parser(prog="callpipe", description="Train, finetune and run animal-call detectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="{train,finetune,infer,eval,sweep}", parser_class=Parser)

    p = sub.add_parser("train", help="train a model from a run configuration")
    _config_args(p)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--mode", choices=("all", "head-only"), default="all")
    _config_args(p)

    p = sub.add_parser("infer", help="predict over whole recordings")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--audio", required=True, type=Path, help="a .wav file or a directory of them")
    p.add_argument("--annotations", type=Path, help="optional annotations; adds metrics.json")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-event-windows", type=int, default=1)
    p.add_argument("--plots", action="store_true", help="write a plot-data bundle per file")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="window-level metrics of a checkpoint on annotated audio")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--audio", type=Path, help="recordings; default: the checkpoint's own val split")
    p.add_argument("--annotations", type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--youden", action="store_true", help="also report the ROC-optimal threshold")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("sweep", help="hyperparameter search")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep-id", default=None)
    _config_args(p)
    return parser


def _check_overrides(tokens: Sequence[str]) -> None:
    for tok in tokens:
        try:
            parse_override(tok)
        except OverrideParseError as exc:
            raise UsageError(str(exc)) from exc


def _resolve(args):
    root = args.config_dir or default_config_dir()
    return load_config(root, args.config_name, args.overrides)


def _runs_root() -> Path:
    from .trainer import runs_root
    return runs_root()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, finetune: bool = False) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import Trainer, make_run_dir, resolve_run_id, write_config_snapshot

    cfg = _resolve(args)
    run_dir = make_run_dir(_runs_root(), resolve_run_id(cfg.get("experiment.run_id")))
    write_config_snapshot(cfg.tree, run_dir)
    init = load_checkpoint(args.checkpoint) if finetune else None
    trainer = Trainer(cfg, run_dir=run_dir, init=init, finetune_mode=args.mode if finetune else None)
    trainer.run()
    print(f"run directory: {run_dir}")
    print(f"best val auc {trainer.best_auc:.6f} at epoch {trainer.best_epoch} of {trainer.epoch}")
    return EXIT_OK


def _audio_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".wav")
        if not files:
            raise FileNotFoundError(f"no .wav files in {path}")
        return files
    if not path.is_file():
        raise FileNotFoundError(f"audio path not found: {path}")
    return [path]


def _snapshot(out: Path, ckpt, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tree = {"checkpoint_config": ckpt.config or {}, "preprocessing": ckpt.preprocessing, **extra}
    (out / "config.yaml").write_text(dump_text(tree), encoding="utf-8")


def cmd_infer(args) -> int:
    from .audio_io import decode_wav
    from .data import load_records
    from .inference import (Predictor, detect, display_grid, evaluate_recordings, export_raven,
                            export_visualization, infer_file, write_predictions_csv)

    predictor = Predictor.load(args.checkpoint)
    _snapshot(args.out, predictor.ckpt, {"inference": {
        "checkpoint": str(args.checkpoint), "audio": str(args.audio),
        "annotations": str(args.annotations) if args.annotations else "",
        "threshold": args.threshold, "min_event_windows": args.min_event_windows}})
    files = _audio_files(args.audio)
    clips = {f.name: decode_wav(f) for f in files}
    rows = []
    selections = args.out / "selections"
    for name, clip in clips.items():
        file_rows = infer_file(predictor, clip, name)
        rows.extend(file_rows)
        events = detect(file_rows, args.threshold, args.min_event_windows, predictor.class_names)
        if len(clips) > 1:
            selections.mkdir(exist_ok=True)
            export_raven(events, selections / f"{Path(name).stem}.Table.1.selections.txt",
                         sample_rate=predictor.sample_rate)
        if args.plots:
            export_visualization(file_rows, display_grid(predictor, clip), args.threshold,
                                 args.out / "plots" / Path(name).stem)
    write_predictions_csv(rows, args.out / "predictions.csv", predictor.class_names)
    all_events = detect(rows, args.threshold, args.min_event_windows, predictor.class_names)
    export_raven(all_events, args.out / "detections.txt", sample_rate=predictor.sample_rate)
    print(f"{len(rows)} windows, {len(all_events)} detections -> {args.out}")
    if args.annotations:
        metrics, _, skipped = evaluate_recordings(predictor, clips, load_records(args.annotations), args.threshold)
        payload = {**metrics.to_dict(), "threshold": args.threshold, "files_without_annotations": skipped}
        (args.out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .audio_io import decode_wav
    from .data import build_data, load_records
    from .inference import Predictor, evaluate_recordings
    from .metrics import compute_metrics, youden_threshold
    from .trainer import SEED_SPLIT, evaluate, positive_scores

    predictor = Predictor.load(args.checkpoint)
    _snapshot(args.out, predictor.ckpt, {"eval": {
        "checkpoint": str(args.checkpoint), "audio": str(args.audio or ""),
        "annotations": str(args.annotations or ""), "threshold": args.threshold, "youden": args.youden}})
    if args.audio is not None:
        if args.annotations is None:
            raise UsageError("eval --audio requires --annotations")
        clips = {f.name: decode_wav(f) for f in _audio_files(args.audio)}
        _, result, skipped = evaluate_recordings(predictor, clips, load_records(args.annotations), args.threshold)
    else:
        cfg = predictor.ckpt.config
        if not cfg:
            raise RuntimeError("checkpoint carries no training config; pass --audio and --annotations")
        seed = int(cfg["experiment"].get("manual_seed", 0))
        data = build_data(cfg["data"], cfg["preprocessors"], seed + SEED_SPLIT)
        result = evaluate(predictor.model, data, data.val, args.threshold)
        skipped = 0
    payload = {**result.metrics.to_dict(), "threshold": args.threshold, "files_without_annotations": skipped,
               "per_class": result.per_class}
    if args.youden:
        labels = (result.class_index != 0).astype(int)
        scores = positive_scores(result.probs)
        t = youden_threshold(labels, scores)
        payload["youden"] = {"threshold": t, **compute_metrics(labels, scores, t).to_dict()}
    (args.out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import parse_sweep_spec, run_sweep, trainer_fn
    from .trainer import resolve_run_id

    spec = parse_sweep_spec(args.spec)
    base = _resolve(args)
    sweep_id = args.sweep_id or resolve_run_id("auto")
    out = _runs_root().parent / "sweeps" / sweep_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(base.to_yaml(), encoding="utf-8")
    (out / "sweep.yaml").write_text(args.spec.read_text(encoding="utf-8"), encoding="utf-8")
    board = run_sweep(spec, trainer_fn(base, out / "runs", spec.metric), args.budget, args.seed,
                      args.workers, out)
    best = board.ranked[0] if board.runs else None
    print(f"sweep directory: {out}")
    if best is not None:
        print(f"best: {best.run_id} {spec.metric}={best.final_metric} ({' '.join(best.overrides)})")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "finetune": lambda a: cmd_train(a, finetune=True),
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_overrides(getattr(args, "overrides", []))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"callpipe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"callpipe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())
