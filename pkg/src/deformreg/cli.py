"""Command-line interface.

Subcommands: synth, train, register, optimize, eval, inspect.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .config import load_run_config
from .engine import (
    load_checkpoint,
    optimize_field,
    register,
    save_checkpoint,
    train,
    history_to_csv,
)
from .errors import ConfigError, DataFormatError, DeformregError, DivergenceError, ShapeError
from .losses import LossConfig
from .metrics import evaluate_pair, reports_to_csv
from .regnet import init_model
from .synth import SynthSpec, generate_synthetic, load_dataset

logger = logging.getLogger("deformreg")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="deformreg", description="2D deformable image registration")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train the field predictor")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.add_argument("--data", help="dataset directory (overrides config paths.dataset)")
    p.add_argument("--out", help="checkpoint path (overrides config paths.checkpoint)")

    p = sub.add_parser("register", help="predict a field with a trained model")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--overlay", help="optional checkerboard of fixed vs warped")

    p = sub.add_parser("optimize", help="optimize a field directly for one pair")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--overlay")
    p.add_argument("--iterations", type=int, default=200, help="Adam steps per pyramid level")
    p.add_argument("--lr", type=float, default=0.1, help="Adam step size in pixels")
    p.add_argument("--scales", type=int, help="pyramid levels (default: sized to the image)")

    p = sub.add_parser("eval", help="evaluate a field against masks/landmarks")
    p.add_argument("--field", required=True)
    p.add_argument("--fixed-mask")
    p.add_argument("--moving-mask")
    p.add_argument("--fixed-lm")
    p.add_argument("--moving-lm")
    p.add_argument("--report", required=True, help="output CSV")
    p.add_argument("--pair-id", default="pair")

    p = sub.add_parser("inspect", help="write a color-coded field visualization")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True, help="output PPM path")

    return parser


def _checkerboard(fixed, warped, tile=8):
    board = np.indices(fixed.shape).sum(axis=0) // tile % 2
    return np.where(board == 0, fixed, warped).astype(np.float32)


def cmd_synth(args):
    spec = SynthSpec.from_json(args.spec)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args):
    run = load_run_config(args.config)
    data_dir = args.data or run.dataset_path
    ckpt_path = args.out or run.checkpoint_path
    if not data_dir:
        raise _UsageError("train: no dataset (pass --data or set paths.dataset)")
    if not ckpt_path:
        raise _UsageError("train: no checkpoint output (pass --out or set paths.checkpoint)")
    dataset = load_dataset(data_dir)
    model = init_model(run.arch, seed=run.train.seed)
    model, history, state = train(model, dataset, run.train, log_every=1)
    Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt_path, model, state)
    out_dir = Path(run.output_dir) if run.output_dir else Path(ckpt_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    history_to_csv(history, out_dir / "history.csv")
    final = history[-1]
    print(
        f"trained {len(history)} epochs on {len(dataset)} pairs; "
        f"final total loss {final.total:.6g}; checkpoint {ckpt_path}"
    )
    return EXIT_OK


def _write_registration_outputs(args, fixed, field, warped, runtime):
    formats.write_field(args.out_field, field)
    formats.write_image(args.out_warped, warped)
    if args.overlay:
        formats.write_image(args.overlay, _checkerboard(fixed.pixels, warped.pixels))
    print(f"field -> {args.out_field}; warped -> {args.out_warped} ({runtime:.3f} s)")


def cmd_register(args):
    model, _ = load_checkpoint(args.model)
    fixed = formats.read_image(args.fixed)
    moving = formats.read_image(args.moving)
    t0 = time.perf_counter()
    field, warped = register(model, fixed, moving)
    runtime = time.perf_counter() - t0
    _write_registration_outputs(args, fixed, field, warped, runtime)
    return EXIT_OK


def cmd_optimize(args):
    from .warp import Image2D, bilinear_warp

    fixed = formats.read_image(args.fixed)
    moving = formats.read_image(args.moving)
    loss_config = LossConfig.default(args.scales) if args.scales else None
    t0 = time.perf_counter()
    field, report = optimize_field(
        fixed, moving, loss_config=loss_config, iterations=args.iterations, lr=args.lr
    )
    warped = Image2D(bilinear_warp(moving.pixels, field.disp).data)
    runtime = time.perf_counter() - t0
    _write_registration_outputs(args, fixed, field, warped, runtime)
    print(f"final total loss {report.total:.6g}")
    return EXIT_OK


def cmd_eval(args):
    field = formats.read_field(args.field)
    hw = (field.height, field.width)
    fixed_mask = formats.read_mask(args.fixed_mask) if args.fixed_mask else None
    moving_mask = formats.read_mask(args.moving_mask) if args.moving_mask else None
    fixed_lm = formats.read_landmarks(args.fixed_lm, hw) if args.fixed_lm else None
    moving_lm = formats.read_landmarks(args.moving_lm, hw) if args.moving_lm else None
    report = evaluate_pair(
        field,
        fixed_mask=fixed_mask,
        moving_mask=moving_mask,
        fixed_landmarks=fixed_lm,
        moving_landmarks=moving_lm,
        pair_id=args.pair_id,
    )
    reports_to_csv([report], args.report)
    print(
        f"dist {report.dist_before:.4g} -> {report.dist_after:.4g}; "
        f"jacc {report.jacc_before:.4g} -> {report.jacc_after:.4g}; report {args.report}"
    )
    return EXIT_OK


def cmd_inspect(args):
    field = formats.read_field(args.field)
    rgb = formats.field_to_color(field)
    formats.write_ppm(
        args.out,
        rgb,
        comment=(
            "deformation field visualization: hue = displacement angle, "
            "saturation = magnitude / 98th percentile, value = 1"
        ),
    )
    print(f"color-coded field -> {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "register": cmd_register,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise _UsageError("no command given")
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"deformreg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"deformreg: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, ConfigError, ShapeError, FileNotFoundError) as e:
        print(f"deformreg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DeformregError as e:
        print(f"deformreg: error: {e}", file=sys.stderr)
        return EXIT_DATA


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
