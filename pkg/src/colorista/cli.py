"""Command line front end.

Subcommands: stylize (batch video rendering), remove-style, train, eval.
Exit codes: 0 success, 2 usage errors, 3 runtime failures.
"""

import argparse
import json
import sys
from pathlib import Path

from .archive import ArchiveError
from .temporal import TEMPORAL_MODES, ConfigurationError


def _lambda_arg(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: '{text}'")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"stylization factor must be in [0,1], got {value}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="colorista",
        description="Photorealistic video color stylization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sty = sub.add_parser("stylize", help="restyle a directory of video frames")
    sty.add_argument("--input", required=True, help="input frame directory (PNG, lexicographic order)")
    sty.add_argument("--output", required=True, help="output frame directory")
    sty.add_argument("--checkpoint", required=True, help="trained checkpoint archive")
    sty.add_argument("--style", required=True,
                     help="style image, or several as IMG,IMG@START,... with frame starts")
    sty.add_argument("--lambda", dest="lam", type=_lambda_arg, default=1.0,
                     help="stylization factor in [0,1] (default 1.0)")
    sty.add_argument("--whiten", type=int, choices=(1, 2, 3), default=None,
                     help="whitening pass count (default: as trained)")
    sty.add_argument("--consecutive", type=int, choices=(1, 2, 3), default=None,
                     help="consecutive transform count (default: as trained)")
    sty.add_argument("--smooth-kernel", type=_positive_int, default=20,
                     help="style smoothing kernel size in frames (default 20)")
    sty.add_argument("--temporal-mode", choices=TEMPORAL_MODES, default="",
                     help="override the trained temporal mode")
    sty.add_argument("--max-frames", type=int, default=0, help="render only the first N frames")
    sty.add_argument("--dry-run", action="store_true", help="echo the resolved job as JSON and exit")
    sty.add_argument("--force", action="store_true",
                     help="proceed when plan settings differ from the checkpoint")

    rem = sub.add_parser("remove-style", help="run the style removal network per frame")
    rem.add_argument("--input", required=True)
    rem.add_argument("--output", required=True)
    rem.add_argument("--checkpoint", required=True)
    rem.add_argument("--style", default="",
                     help="style reference; defaults to each frame referencing itself")
    rem.add_argument("--max-frames", type=int, default=0)

    tr = sub.add_parser("train", help="self-supervised training from a JSON config")
    tr.add_argument("--config", required=True,
                    help="JSON file with training fields plus content_root/style_root/out_dir")
    tr.add_argument("--resume", default="", help="checkpoint to continue from")

    ev = sub.add_parser("eval", help="metrics over rendered frames, or a timing benchmark")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--pairs", default="",
                    help="JSON manifest of {content, style, output} path triples")
    ev.add_argument("--out", default="report.json", help="JSON report path")
    ev.add_argument("--table", default="", help="optional text table path")
    ev.add_argument("--weights", default="", help="calibrated perceptual-weight archive")
    ev.add_argument("--bench", action="store_true", help="run the timing benchmark")
    ev.add_argument("--resolutions", default="600x360",
                    help="comma-separated WxH list for --bench")
    ev.add_argument("--frames", type=_positive_int, default=80,
                    help="timed frames per resolution for --bench")
    return parser


def _cmd_stylize(args):
    from .stylizer import RenderJob, StylePlan, stylize_video
    from .training import load_networks

    defaults = {}
    if args.whiten is None or args.consecutive is None:
        # fill plan defaults from the checkpoint when it is reachable
        if not args.dry_run:
            _, restoration, _, _ = load_networks(args.checkpoint)
            defaults = {
                "whiten": restoration.config.whiten_count,
                "consecutive": restoration.config.consecutive_count,
            }
        else:
            defaults = {"whiten": 1, "consecutive": 1}
    try:
        plan = StylePlan.parse_styles(
            args.style,
            lam=args.lam,
            consecutive=args.consecutive or defaults.get("consecutive", 1),
            whiten=args.whiten or defaults.get("whiten", 1),
            smooth_kernel=args.smooth_kernel,
        )
        job = RenderJob(
            input_dir=args.input,
            output_dir=args.output,
            checkpoint=args.checkpoint,
            plan=plan,
            temporal_mode=args.temporal_mode,
            force=args.force,
            max_frames=args.max_frames,
        )
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(json.dumps(job.to_dict(), indent=2))
        return 0
    report = stylize_video(job)
    for line in report.warnings:
        print(f"warning: {line}", file=sys.stderr)
    print(f"{report.frames} frames -> {report.output_dir} "
          f"({report.mean_seconds:.3f} s/frame)")
    return 0


def _cmd_remove_style(args):
    from .stylizer import remove_style

    report = remove_style(
        args.input, args.output, args.checkpoint,
        style=args.style or None, max_frames=args.max_frames,
    )
    print(f"{report.frames} frames -> {report.output_dir} "
          f"({report.mean_seconds:.3f} s/frame)")
    return 0


def _cmd_train(args):
    from .training import TrainConfig, Trainer, ingest_dataset, load_checkpoint

    raw = json.loads(Path(args.config).read_text())
    content_root = raw.pop("content_root", None)
    style_root = raw.pop("style_root", None)
    out_dir = raw.pop("out_dir", "runs")
    if not content_root or not style_root:
        print("usage error: config must set content_root and style_root", file=sys.stderr)
        return 2
    config = TrainConfig.from_dict(raw)
    dataset = ingest_dataset(content_root, style_root, crop_size=config.crop_size)
    if args.resume:
        trainer = load_checkpoint(args.resume, dataset=dataset)
    else:
        trainer = Trainer(config, dataset=dataset)
    path = trainer.fit(out_dir)
    print(f"final checkpoint: {path}")
    return 0


def _cmd_eval(args):
    from .metrics import (
        MetricsReport,
        benchmark,
        emit_report,
        evaluate_pairs,
        file_digest,
        load_perceptual_weights,
    )
    from .training import load_networks

    report = MetricsReport(checkpoint_hash=file_digest(args.checkpoint))
    if args.bench:
        resolutions = [r for r in args.resolutions.split(",") if r]
        report.timings = benchmark(args.checkpoint, resolutions, frames=args.frames)
    if args.pairs:
        manifest = json.loads(Path(args.pairs).read_text())
        triples = [
            (e["content"], e["style"], e["output"]) if isinstance(e, dict) else tuple(e)
            for e in manifest
        ]
        _, _, encoder, meta = load_networks(args.checkpoint)
        weights = load_perceptual_weights(args.weights) if args.weights else None
        report.pairs = evaluate_pairs(triples, encoder, weights=weights)
        report.perceptual_calibrated = weights is not None
        report.config = {"checkpoint_epoch": meta.get("epoch")}
    if not args.bench and not args.pairs:
        print("usage error: eval needs --pairs and/or --bench", file=sys.stderr)
        return 2
    emit_report(report, args.out, args.table or None)
    print(report.to_table())
    return 0


_COMMANDS = {
    "stylize": _cmd_stylize,
    "remove-style": _cmd_remove_style,
    "train": _cmd_train,
    "eval": _cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ArchiveError, ConfigurationError, RuntimeError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
