"""
Command-line entry point for the kd-lic toolkit.
"""
import argparse
import sys
from typing import List, Optional

from loguru import logger

from src.cli import commands
from src.core.config import configure_logging
from src.core.errors import KdlicError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdlic",
        description="Train, distill, evaluate and profile scale-hyperprior image codecs",
    )
    parser.add_argument("--log-level", type=str, default=None, help="Override KDLIC_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # index
    p = subparsers.add_parser("index", help="Write the manifest of a training image folder")
    p.add_argument("root", type=str, help="Folder of training images")
    p.set_defaults(handler=commands.cmd_index)

    # train
    p = subparsers.add_parser("train", help="Train or distill a model from an experiment config")
    p.add_argument("config", type=str, help="Experiment YAML file")
    p.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="Override a config value"
    )
    p.add_argument("--rd-quality", type=int, default=None, help="Zoo quality 1-8 selecting the RD lambda")
    p.add_argument("--steps", type=int, default=None, help="Override train.steps")
    p.add_argument("--seed", type=int, default=None, help="Override train.seed")
    p.add_argument("--tag", type=str, default=None, help="Run tag (unique within output_dir)")
    p.add_argument("--device", type=str, default=None, help="Compute device (default KDLIC_DEVICE)")
    p.set_defaults(handler=commands.cmd_train)

    # eval
    p = subparsers.add_parser("eval", help="Evaluate a checkpoint on a lossless image set")
    p.add_argument("checkpoint", type=str, help="Checkpoint file")
    p.add_argument("--eval-root", type=str, default=None, help="Evaluation images (default KDLIC_EVAL_ROOT)")
    p.add_argument("--results", type=str, default="results.json", help="RD results file to update")
    p.add_argument("--model-id", type=str, default=None, help="Model id written into the results")
    p.add_argument("--label", type=str, default=None, help="Point label (default lambda=<value>)")
    p.add_argument("--save-reconstructions", type=str, default=None, help="Write reconstructions as PNG")
    p.add_argument("--device", type=str, default=None, help="Compute device")
    p.set_defaults(handler=commands.cmd_eval)

    # profile
    p = subparsers.add_parser("profile", help="Measure FLOPs, throughput and energy")
    p.add_argument("checkpoint", type=str, nargs="?", default=None, help="Checkpoint file")
    p.add_argument("--codec", choices=["jpeg", "webp", "jpeg2000"], default=None, help="Profile a codec instead")
    p.add_argument("--quality", type=int, default=75, help="Codec quality parameter")
    p.add_argument("--flag", action="append", default=[], metavar="KEY=VALUE", help="Codec option")
    p.add_argument("--eval-root", type=str, default=None, help="Images for the timed session")
    p.add_argument("--passes", type=int, default=50, help="Timed passes over the image set")
    p.add_argument(
        "--meter", type=str, default="none", help="Energy source: telemetry, proxy:<watts> or none"
    )
    p.add_argument("--input-shape", type=str, default=None, help="Frame shape for FLOPs, e.g. 512x768")
    p.add_argument("--model-id", type=str, default=None, help="Model id written into the report")
    p.add_argument("--results", type=str, default=None, help="Results file to store the report in")
    p.add_argument("--device", type=str, default=None, help="Compute device")
    p.set_defaults(handler=commands.cmd_profile)

    # codec-sweep
    p = subparsers.add_parser("codec-sweep", help="RD curve of a traditional codec")
    p.add_argument("codec", choices=["jpeg", "webp", "jpeg2000"], help="Codec")
    p.add_argument("--qualities", type=int, nargs="+", default=[10, 30, 50, 70, 90], help="Quality values")
    p.add_argument("--flag", action="append", default=[], metavar="KEY=VALUE", help="Codec option")
    p.add_argument("--eval-root", type=str, default=None, help="Evaluation images")
    p.add_argument("--results", type=str, default="results.json", help="RD results file to update")
    p.add_argument("--model-id", type=str, default=None, help="Model id (default codec name)")
    p.set_defaults(handler=commands.cmd_codec_sweep)

    # bd
    p = subparsers.add_parser("bd", help="BD-Rate and BD-PSNR between two results files")
    p.add_argument("reference", type=str, help="Reference results file")
    p.add_argument("test", type=str, help="Test results file")
    p.add_argument("--reference-id", type=str, default=None, help="Model id inside the reference file")
    p.add_argument("--test-id", type=str, default=None, help="Model id inside the test file")
    p.add_argument("--variant", choices=["cubic", "pchip"], default="cubic", help="Curve fit")
    p.set_defaults(handler=commands.cmd_bd)

    # plot
    p = subparsers.add_parser("plot", help="Static RD and resource plots")
    p.add_argument("results", type=str, nargs="+", help="Results files")
    p.add_argument("--out-dir", type=str, default="plots", help="Output folder")
    p.add_argument("--title", type=str, default="Average RD curve", help="RD plot title")
    p.set_defaults(handler=commands.cmd_plot)

    # import-teacher
    p = subparsers.add_parser("import-teacher", help="Convert published hyperprior weights")
    p.add_argument("source", type=str, help="Published state dict archive")
    p.add_argument("destination", type=str, help="Native checkpoint to write")
    p.add_argument("--quality", type=int, default=None, help="Zoo quality of the weights (1-8)")
    p.set_defaults(handler=commands.cmd_import_teacher)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit status."""
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level)
    try:
        return args.handler(args)
    except KdlicError as e:
        logger.error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
