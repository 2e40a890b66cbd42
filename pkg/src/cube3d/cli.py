"""Command-line surface: preprocess, augment, synth, train, predict,
evaluate, stats, audit.

Exit codes: 0 success, 1 validation/data errors (one-line diagnostic on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, model, training
from .errors import ConfigError, Cube3DError, ValidationError
from .tensor import save_vten

SEED_ENV_VAR = "CUBE3D_SEED"


def _config_from_sources(args):
    """Resolve TrainConfig precedence: file < CLI flags < CUBE3D_SEED."""
    fields = {f.name: f for f in dataclasses.fields(training.TrainConfig)}
    values = {}
    if args.config:
        for lineno, line in enumerate(Path(args.config).read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{args.config}:{lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in fields:
                raise ConfigError(f"{args.config}:{lineno}: unknown key {key!r}")
            caster = int if fields[key].type == "int" else float
            try:
                values[key] = caster(raw)
            except ValueError:
                raise ConfigError(
                    f"{args.config}:{lineno}: bad value {raw!r} for {key}"
                ) from None
    overrides = {
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "momentum": args.momentum,
        "max_epochs": args.epochs,
        "seed": args.seed,
        "dropout_rate": args.dropout,
        "plateau_patience_epochs": args.plateau_patience,
        "plateau_factor": args.plateau_factor,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer") from None
    return training.TrainConfig(**values)


def _manifest_root(args):
    return args.root if args.root else str(Path(args.manifest).parent)


def cmd_preprocess(args):
    seq = data.ingest_frames(args.frames, video_id=args.video_id)
    seq = data.preprocess_sequence(seq, size=args.size, subtract_mean=args.subtract_mean)
    save_vten(args.out, seq.frames)
    print(f"wrote {args.out}: {len(seq)} frames at {args.size}x{args.size}")
    return 0


def cmd_augment(args):
    manifest = data.read_manifest(args.manifest)
    augmented = data.augment_manifest(manifest)
    data.write_manifest(args.out, augmented)
    print(
        f"wrote {args.out}: {len(manifest.entries)} entries -> "
        f"{len(augmented.entries)}"
    )
    return 0


def cmd_synth(args):
    manifest, annotations = data.synth_fixture(
        seed=args.seed if args.seed is not None else 0,
        num_classes=args.classes,
        clips_per_class=args.clips_per_class,
        resolution=args.resolution,
        length=args.length,
        out_dir=args.out,
        test_clips_per_class=args.test_clips_per_class,
    )
    print(
        f"wrote fixture to {args.out}: {len(manifest.entries)} clips, "
        f"{len(annotations)} annotations"
    )
    return 0


def cmd_train(args):
    config = _config_from_sources(args)
    manifest = data.read_manifest(args.manifest)
    annotations = data.read_annotations(args.annotations)
    root = _manifest_root(args)
    x, y = training.load_split_cubes(manifest, annotations, root, "train")
    frames, height, width, channels = x.shape[1:]
    if args.arch == "standard":
        net = model.build_model(
            num_classes=args.classes,
            frames=frames,
            height=height,
            width=width,
            channels=channels,
            dropout_rate=config.dropout_rate,
        )
    else:
        net = model.build_compact_model(
            num_classes=args.classes,
            frames=frames,
            height=height,
            width=width,
            channels=channels,
            dropout_rate=config.dropout_rate,
        )
    model.init_weights(net, model.InitSpec(seed=config.seed, std=args.init_std))
    net, reports = training.train_on_arrays(net, x, y, config)
    model.save_checkpoint(
        net, args.out, epoch=reports[-1].epoch, learning_rate=reports[-1].lr
    )
    if args.log:
        training.write_epoch_log(args.log, reports)
    final = reports[-1]
    print(
        f"trained {config.max_epochs} epochs on {x.shape[0]} cubes: "
        f"loss {final.loss:.4f}, accuracy {final.accuracy:.3f}; wrote {args.out}"
    )
    return 0


def cmd_predict(args):
    net = model.load_checkpoint(args.checkpoint)
    seq = data.ingest_frames(args.frames, video_id=args.video_id)
    size = net.input_shape[1]
    if seq.frames.shape[1:3] != (size, size):
        seq = data.preprocess_sequence(seq, size=size)
    trace = training.predict_video(net, seq, window=net.input_shape[0])
    training.write_trace(args.out, [trace], net.num_classes)
    print(f"wrote {args.out}: {len(trace.records)} windows")
    return 0


def cmd_evaluate(args):
    annotations = data.read_annotations(args.annotations)
    by_video = {}
    for a in annotations:
        by_video.setdefault(a.video_id, []).append(a)
    y_true, rows, video_ids = [], [], []
    num_classes = None
    for trace_path in args.trace:
        trace_rows, trace_classes = training.read_trace(trace_path)
        if num_classes is None:
            num_classes = trace_classes
        elif num_classes != trace_classes:
            raise ValidationError(
                f"{trace_path}: {trace_classes} classes, earlier traces had {num_classes}"
            )
        for video_id, start, end, probs in trace_rows:
            anns = by_video.get(video_id)
            if not anns:
                raise ValidationError(f"unlabeled test video {video_id}")
            horizon = max(end + 1, max(a.end_frame for a in anns) + 1)
            labels = data.frame_labels(anns, horizon)
            win = labels[start : end + 1]
            vals, counts = np.unique(win, return_counts=True)
            contenders = vals[counts == counts.max()]
            if len(contenders) == 1:
                y_true.append(int(contenders[0]))
            else:
                y_true.append(
                    min((int(np.argmax(win == v)), int(v)) for v in contenders)[1]
                )
            rows.append(probs)
            video_ids.append(video_id)
    y = np.asarray(y_true)
    scores = np.stack(rows)
    predicted = None
    unit = "windows"
    if args.per_video:
        y, scores, predicted = metrics.aggregate_per_video(video_ids, y, scores)
        unit = "videos"
    report = metrics.build_report(y, scores, num_classes, predicted=predicted)
    metrics.write_metrics_files(report, args.out_dir)
    print(
        f"evaluated {len(y)} {unit}: average accuracy "
        f"{report.average_accuracy:.3f}, micro AUC {report.micro_auc:.3f}, "
        f"macro AUC {report.macro_auc:.3f}; reports in {args.out_dir}"
    )
    return 0


def cmd_stats(args):
    manifest = data.read_manifest(args.manifest)
    annotations = data.read_annotations(args.annotations)
    report = data.dataset_stats(
        manifest, annotations, root=_manifest_root(args), fps=args.fps
    )
    print(report.format())
    return 0


def cmd_audit(args):
    if args.checkpoint:
        net = model.load_checkpoint(args.checkpoint)
    else:
        net = model.build_model(num_classes=args.classes)
    report = model.shape_audit(net)
    print(report.format())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cube3d",
        description="Spatiotemporal ConvNet toolkit for video anomaly recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resize and scale frames into a container")
    p.add_argument("--frames", required=True, help="PPM directory or .vten container")
    p.add_argument("--out", required=True, help="output .vten path")
    p.add_argument("--size", type=int, default=170)
    p.add_argument("--video-id", default=None)
    p.add_argument("--subtract-mean", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("augment", help="triple a training manifest with flip twins")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips-per-class", type=int, default=8)
    p.add_argument("--test-clips-per-class", type=int, default=2)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--length", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--root", default=None, help="base dir for manifest paths")
    p.add_argument("--arch", choices=("standard", "compact"), default="standard")
    p.add_argument("--classes", type=int, default=14)
    p.add_argument("--config", default=None, help="key = value training config file")
    p.add_argument("--log", default=None, help="epoch report CSV path")
    p.add_argument("--init-std", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--plateau-patience", type=int, default=None)
    p.add_argument("--plateau-factor", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify every 16-frame window of a video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="output trace CSV")
    p.add_argument("--video-id", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction traces against annotations")
    p.add_argument("--trace", action="append", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument(
        "--per-video", action="store_true",
        help="majority-vote one prediction per video instead of per window",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="manifest statistics per split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--root", default=None)
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("audit", help="layer-shape audit against the reference table")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--classes", type=int, default=14)
    p.set_defaults(func=cmd_audit)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Cube3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
