#!/usr/bin/env python3

import argparse
import sys
from typing import List, NoReturn, Optional

from pcdlib.config import PRESETS
from pcdlib.distillation import LEVELS
from pcdlib.erf import FORMATS, TOY_MODELS
from pcdlib.exceptions import PcdlibError
from pcdlib.session import PcdSession
from pcdlib.verify import SUITES
from pcdlib.cli.handle_data import handle_gen_data_command
from pcdlib.cli.handle_distill import handle_distill_command, handle_export_command
from pcdlib.cli.handle_erf import handle_erf_command
from pcdlib.cli.handle_teacher import handle_adapt_head_command, handle_pretrain_command
from pcdlib.cli.handle_verify import handle_config_command, handle_verify_command
from pcdlib.cli.validators import non_negative_int, positive_float, positive_int

# commands that write to --out
NEEDS_OUT = ("gen-data", "pretrain-teacher", "adapt-head", "distill", "export", "erf")


def setup_data_subcommand(subparsers: argparse._SubParsersAction) -> None:
    gen = subparsers.add_parser("gen-data", help="Generate the synthetic image store into --out")
    gen.add_argument("--n", type=non_negative_int, help="Number of images (default: data.n_images)")
    gen.add_argument("--size", type=positive_int, help="Image side in pixels (default: data.image_size)")


def setup_teacher_subcommands(subparsers: argparse._SubParsersAction) -> None:
    pretrain = subparsers.add_parser(
        "pretrain-teacher", help="Pre-train a teacher backbone + vector head, write its checkpoint to --out"
    )
    pretrain.add_argument("--data", required=True, help="Image store directory")
    pretrain.add_argument(
        "--random-init", action="store_true", help="Skip training and keep the random initialization"
    )
    pretrain.add_argument("--metrics", help="Append per-step metrics to this file")

    adapt = subparsers.add_parser(
        "adapt-head", help="Rewrite the teacher head for feature maps and verify invariance"
    )
    adapt.add_argument("--teacher", required=True, help="Vector-kind teacher checkpoint")
    drop = adapt.add_mutually_exclusive_group()
    drop.add_argument(
        "--drop-last-bn",
        dest="drop_last_bn",
        action="store_true",
        default=None,
        help="Remove a trailing affine-free BN before adapting (default: model.drop_last_bn)",
    )
    drop.add_argument("--keep-last-bn", dest="drop_last_bn", action="store_false", help="Keep the trailing BN")
    adapt.add_argument("--tol", type=positive_float, default=1e-5, help="Invariance tolerance (default: 1e-5)")
    adapt.add_argument("--trials", type=positive_int, default=64, help="Random 7x7 maps to test (default: 64)")


def setup_distill_subcommands(subparsers: argparse._SubParsersAction) -> None:
    distill = subparsers.add_parser("distill", help="Distill a teacher into a student, outputs under --out")
    distill.add_argument("--teacher", required=True, help="Teacher checkpoint (vector- or map-kind head)")
    distill.add_argument("--data", required=True, help="Image store directory")
    distill.add_argument("--level", choices=LEVELS, help="Loss level (default: loss.level)")
    sym = distill.add_mutually_exclusive_group()
    sym.add_argument("--symmetric", dest="symmetric", action="store_true", default=None, help="Use both views")
    sym.add_argument("--asymmetric", dest="symmetric", action="store_false", help="One view per image")
    distill.add_argument("--resume", help="Raw checkpoint to continue from")
    distill.add_argument("--stop-at", type=positive_int, help="Halt after this many total steps")

    export = subparsers.add_parser("export", help="NormRescale export of a raw student checkpoint to --out")
    export.add_argument("--checkpoint", required=True, help="Raw student checkpoint")
    export.add_argument("--anchor", type=float, help="Kernel scale factor (default: export.anchor)")
    export.add_argument("--no-rescale", action="store_true", help="Export without scaling kernels")


def setup_erf_subcommand(subparsers: argparse._SubParsersAction) -> None:
    erf = subparsers.add_parser("erf", help="Probe an effective receptive field and write a heatmap to --out")
    source = erf.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="Checkpoint whose backbone is probed")
    source.add_argument("--model", choices=TOY_MODELS, help="Built-in toy architecture")
    erf.add_argument("--with-head", action="store_true", help="Probe student backbone + head + enhancer")
    erf.add_argument("--format", choices=FORMATS, default="pgm", help="Heatmap format (default: pgm)")
    erf.add_argument("--samples", type=positive_int, help="Noise inputs (default: erf.samples)")
    erf.add_argument("--size", type=positive_int, help="Input side (default: erf.input_size)")


def setup_check_subcommands(subparsers: argparse._SubParsersAction) -> None:
    verify = subparsers.add_parser("verify", help="Run the invariance, gradient and oracle suites")
    verify.add_argument(
        "--suite", action="append", choices=list(SUITES), help="Run only this suite (repeatable)"
    )

    config = subparsers.add_parser("config", help="Print or write (--out) the reference config")
    config.add_argument("--preset", choices=PRESETS, default="desk", help="Preset (default: desk)")

    subparsers.add_parser("version", help="Show version information")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcdman", description="Pixel-wise contrastive distillation at desk scale"
    )
    parser.add_argument("--config", help="JSON config file (default: $PCDLIB_CONFIG or the desk preset)")
    parser.add_argument("--seed", type=int, help="Master seed (default: $PCDLIB_SEED or the config's)")
    parser.add_argument("--out", help="Output file or directory of the command")
    parser.add_argument("--debug", action="store_true", help="Enable debug output")
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    setup_data_subcommand(subparsers)
    setup_teacher_subcommands(subparsers)
    setup_distill_subcommands(subparsers)
    setup_erf_subcommand(subparsers)
    setup_check_subcommands(subparsers)
    return parser


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "config":
        handle_config_command(args)
        return
    if args.command == "version":
        from pcdlib import VERSION

        print(f"pcdman version {VERSION}")
        return

    with PcdSession(config_file=args.config, seed=args.seed, debug=args.debug) as session:
        if args.command == "gen-data":
            handle_gen_data_command(args, session)

        elif args.command == "pretrain-teacher":
            handle_pretrain_command(args, session)

        elif args.command == "adapt-head":
            handle_adapt_head_command(args, session)

        elif args.command == "distill":
            handle_distill_command(args, session)

        elif args.command == "export":
            handle_export_command(args, session)

        elif args.command == "erf":
            handle_erf_command(args, session)

        elif args.command == "verify":
            handle_verify_command(args, session)


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI; returns the exit code (2 usage, 1 failure, 0 success)."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return 2
        if args.command in NEEDS_OUT and not args.out:
            parser.error(f"{args.command} requires --out")
        dispatch(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    except PcdlibError as e:
        print(f"Error: {e}")
        return 1
    except Exception as e:
        print(f"An error occurred: {e}")
        return 1
    return 0


def main() -> NoReturn:
    sys.exit(run())


if __name__ == "__main__":
    main()
