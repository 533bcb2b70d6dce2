"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .dataset import generate_synthetic_dataset, load_dataset
from .errors import (
    DataError,
    IndexOutOfRange,
    InvalidConfig,
    InvalidModel,
    IoError,
    SaliencyError,
    ShapeMismatch,
    TraceMismatch,
    UnknownLayer,
)
from .harness import (
    InvariantViolation,
    blur_drops,
    layer_sweep,
    run_eval,
    summary_lines,
    write_report_csv,
)
from .imaging import load_ppm, save_pgm
from .model import TrainConfig, build_toy_cnn, load_model, save_model, train
from .saliency import METHODS, TAP_POINTS, compute_saliency

log = logging.getLogger("implicit_saliency")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _radii(text):
    try:
        return [float(item) for item in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid radius list {text!r}") from None


def _methods(text):
    items = _csv_list(text)
    bad = [m for m in items if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
    return items


def cmd_gen_data(args):
    manifest = generate_synthetic_dataset(args.out, args.count, args.classes, args.seed, args.split)
    print(f"wrote {len(manifest)} {manifest.split} images to {manifest.root}")


def cmd_train(args):
    data = load_dataset(args.data)
    init_seed = args.seed if args.init_seed is None else args.init_seed
    model = build_toy_cnn(data.class_count, init_seed)
    trained, accuracy = train(model, data, TrainConfig(args.epochs, args.lr, args.batch, args.seed))
    save_model(trained, args.out)
    print(f"train accuracy {accuracy:.4f}; model written to {args.out}")


def cmd_saliency(args):
    model = load_model(args.model)
    image = load_ppm(args.image)
    layer = args.layer or (model.conv_layers[-1] if model.conv_layers else None)
    if args.method != "gbp" and layer is None:
        raise InvalidConfig("--layer is required for models without conv layers")
    options = {}
    if args.method in ("implicit", "feedforward", "gradcam"):
        options["tap_point"] = args.tap_point
    if args.class_index is not None:
        if args.method not in ("gradcam", "gbp"):
            raise InvalidConfig("--class only applies to gradcam and gbp")
        options["class_choice"] = args.class_index
    smap = compute_saliency(args.method, model, image, layer, image.shape[-2:], **options)
    save_pgm(smap.values, args.out)
    print(f"{args.method} saliency written to {args.out}")


def cmd_eval(args):
    model = load_model(args.model)
    data = load_dataset(args.data)
    report = run_eval(
        model,
        data,
        args.methods,
        args.layers,
        args.blur_radii,
        maps_dir=args.out_maps,
        workers=args.workers,
        tap_point=args.tap_point,
    )
    write_report_csv(report, args.out_csv)
    print("\n".join(summary_lines(report)))
    radii = sorted(set(args.blur_radii))
    if len(radii) > 1:
        high = 3.0 if 3.0 in radii else radii[-1]
        print(f"\nNSS / CC drop from radius {radii[0]:g} to {high:g}:")
        for (method, layer), drop in blur_drops(report, high=high, low=radii[0]).items():
            print(f"  {method:<12}{layer:<8}{drop['nss_drop']:>9.4f}{drop['cc_drop']:>9.4f}")
    print(f"\n{len(report.records)} records written to {args.out_csv}")


def cmd_sweep_layers(args):
    model = load_model(args.model)
    data = load_dataset(args.data)
    report = layer_sweep(model, data, args.method, tap_point=args.tap_point)
    write_report_csv(report, args.out_csv)
    print("\n".join(summary_lines(report)))
    stab = report.stability[args.method]
    print(f"\nstability drop (max - min layer NSS): {stab['nss_drop']:.4f} ({stab['nss_relative_drop']:.1%})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="implicit-saliency", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a seeded synthetic fixation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy CNN on a train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init-seed", type=int, help="weight initialisation seed (default: --seed)")
    p.set_defaults(func=cmd_train)

    tap_help = "where a conv layer is read: block output (default), after ReLU, or raw conv"

    p = sub.add_parser("saliency", help="compute one saliency map")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--layer", help="tap layer (default: last conv layer)")
    p.add_argument("--out", required=True)
    p.add_argument("--class", dest="class_index", type=int, help="target class for gradcam/gbp")
    p.add_argument("--tap-point", choices=TAP_POINTS, default="block", help=tap_help)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("eval", help="score methods x layers x blur radii")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--methods", type=_methods, default=list(METHODS))
    p.add_argument("--layers", type=_csv_list, default=None)
    p.add_argument("--blur-radii", type=_radii, default=[0.0, 1.0, 2.0, 3.0, 4.0])
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-maps", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tap-point", choices=TAP_POINTS, default="block", help=tap_help)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-layers", help="radius-0 evaluation of one method at every conv block")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--tap-point", choices=TAP_POINTS, default="block", help=tap_help)
    p.set_defaults(func=cmd_sweep_layers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (InvalidConfig, UnknownLayer, IndexOutOfRange) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IoError, ShapeMismatch, InvalidModel, TraceMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except SaliencyError as exc:
        log.debug("unexpected package error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
