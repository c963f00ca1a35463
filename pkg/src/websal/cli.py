"""Command-line entry point: train, predict, evaluate, outline, synth.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="websal", description="Two-stage outline-aware webpage saliency GAN.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stagewise", action="store_true", help="train stage 1 alone for the first half")

    pr = sub.add_parser("predict", help="coarse and fine maps for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out-coarse", required=True)
    pr.add_argument("--out-fine", required=True)
    pr.add_argument("--heatmap")

    ev = sub.add_parser("evaluate", help="CC/NSS over a dataset directory or synthetic:N")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--blur-sigma", type=float)
    ev.add_argument("--stage", choices=("fine", "coarse"), default="fine")
    ev.add_argument("--seed", type=int, default=0, help="seed for synthetic:N data")
    ev.add_argument("--no-figures", action="store_true")

    ol = sub.add_parser("outline", help="LoG edge map of an image")
    ol.add_argument("--image", required=True)
    ol.add_argument("--sigma", type=float, default=2.0)
    ol.add_argument("--radius", type=int)
    ol.add_argument("--out", required=True)

    sy = sub.add_parser("synth", help="write synthetic webpages in the dataset layout")
    sy.add_argument("--count", type=int, required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--size", default="64x64", help="HxW, multiples of 16")
    return p


def _cmd_train(args) -> None:
    from .trainer import TrainConfig, train
    cfg = TrainConfig.load(args.config)
    if args.stagewise:
        cfg.stagewise = True
    path = train(cfg, resume_from=args.resume)
    print(path)


def _cmd_predict(args) -> None:
    from . import imageops
    from .networks import predict
    from .tensor import Tensor
    from .trainer import load_model

    params, net, _ = load_model(args.checkpoint)
    image = imageops.load_image(args.image)
    h, w = image.shape[2:]
    padded = Tensor(imageops.pad_to_multiple(image.data, 16, "reflect"))
    coarse, fine = predict(params, padded, net)
    coarse = Tensor(imageops.crop(coarse.data.astype(np.float64), h, w))
    fine = Tensor(imageops.crop(fine.data.astype(np.float64), h, w))
    imageops.save_gray(coarse, args.out_coarse)
    imageops.save_gray(fine, args.out_fine)
    if args.heatmap:
        imageops.save_heatmap(fine, image, args.heatmap)


def _cmd_evaluate(args) -> None:
    from . import data as data_mod
    from .metrics import evaluate_dataset
    from .networks import predict
    from .trainer import load_model

    params, net, _ = load_model(args.checkpoint)
    samples = data_mod.resolve_dataset(args.data, args.blur_sigma, args.seed)
    out = Path(args.report)
    data_mod.write_manifest(samples, out / "manifest.json")
    report = evaluate_dataset(params, samples, net, stage=args.stage)
    csv_path, json_path = report.write(out)
    if not args.no_figures:
        from .report import plot_metric_distribution, plot_predictions
        plot_metric_distribution(report, out / "metrics_hist.png")
        rows = []
        for s in samples[:4]:
            c, f = predict(params, s.image, net)
            h, w = s.orig_hw
            rows.append((s.image.data[0, :, :h, :w], c.data[0, 0, :h, :w], f.data[0, 0, :h, :w],
                         s.saliency.data[0, 0, :h, :w]))
        plot_predictions(rows, out / "predictions.png")
    summary = report.summary()
    print(f"images={summary['count']} cc={summary['cc_mean']:.4f} nss={summary['nss_mean']:.4f} "
          f"excluded={summary['excluded']}  ->  {csv_path}, {json_path}")


def _cmd_outline(args) -> None:
    from . import imageops
    image = imageops.load_image(args.image)
    imageops.save_gray(imageops.extract_outline(image, args.sigma, args.radius), args.out)


def _cmd_synth(args) -> None:
    from . import data as data_mod
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {args.size!r}") from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = data_mod.synth_dataset(args.count, args.seed, h, w)
    data_mod.write_fiwi_layout(samples, args.out)


COMMANDS = {"train": _cmd_train, "predict": _cmd_predict, "evaluate": _cmd_evaluate,
            "outline": _cmd_outline, "synth": _cmd_synth}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"websal {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
