import argparse
import json
import logging
import sys
from typing import List, Optional

from .client import DistillClient, load_run_settings
from .config import LOG_LEVEL
from .exceptions import (
    ConfigError,
    CurDistillError,
    DatasetLoadError,
    FormatError,
    StageError,
    ValidationError,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (ConfigError, ValidationError, DatasetLoadError, FormatError)


def _csv(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _int_csv(value: str) -> List[int]:
    try:
        return [int(item) for item in _csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curdistill", description="Curriculum dataset distillation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file; flags override its values")
    common.add_argument("--dataset")
    common.add_argument("--data-root", dest="data_root")
    common.add_argument("--run-dir", dest="run_dir")
    common.add_argument("--ipc", type=int)
    common.add_argument("--arch")
    common.add_argument("--seed", type=int)
    common.add_argument("--device")
    common.add_argument("--resume", action="store_true", default=None)
    common.add_argument("--teacher", help="teacher checkpoint directory")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("squeeze", parents=[common], help="train the teacher")

    distill = sub.add_parser("distill", parents=[common], help="run the curriculum distillation")
    distill.add_argument("--schedule", choices=["logarithmic", "uniform"])
    distill.add_argument("--cum-sizes", dest="cum_sizes", type=_int_csv)
    distill.add_argument("--export-soft-labels", dest="export_soft_labels", action="store_true", default=None)

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a synthetic dataset")
    evaluate.add_argument("--synthetic", help="synthetic dataset directory")
    evaluate.add_argument("--archs", type=_csv)
    evaluate.add_argument("--seeds", type=int)
    evaluate.add_argument("--label-mode", dest="label_mode", choices=["soft", "hard"])
    evaluate.add_argument("--baseline", action="store_true", default=None, help="also evaluate random real images")

    continual = sub.add_parser("continual", parents=[common], help="class-incremental evaluation")
    continual.add_argument("--synthetic")
    continual.add_argument("--n-steps", dest="n_steps", type=int)
    continual.add_argument("--label-mode", dest="label_mode", choices=["soft", "hard"])

    export = sub.add_parser("export-features", parents=[common], help="export penultimate features")
    export.add_argument("--synthetic")
    export.add_argument("--model", help="checkpoint directory (defaults to the teacher)")
    export.add_argument("--source", choices=["synthetic", "train", "val"])

    plan = sub.add_parser("plan", parents=[common], help="print the curriculum plan")
    plan.add_argument("--schedule", choices=["logarithmic", "uniform"])
    plan.add_argument("--cum-sizes", dest="cum_sizes", type=_int_csv)
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    settings = load_run_settings(args.config, **overrides)
    client = DistillClient(settings)

    if args.command == "plan":
        print(json.dumps(client.plan(), indent=2))
    elif args.command == "squeeze":
        print(client.squeeze())
    elif args.command == "distill":
        final = client.distill()
        print(f"{len(final)} synthetic images written to {client.run_dir / 'final'}")
    elif args.command == "eval":
        for summary in client.evaluate():
            tag = " (random real)" if summary.baseline else ""
            print(f"{summary.arch}{tag}: {summary.mean:.4f} +- {summary.std:.4f}")
    elif args.command == "continual":
        for result in client.continual():
            print(f"step {result.step}: {len(result.classes)} classes, accuracy {result.accuracy:.4f}")
    elif args.command == "export-features":
        print(client.export_features())
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO))
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except StageError as e:
        cause = e.cause if isinstance(e.cause, INPUT_ERRORS) else None
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT if cause is not None else EXIT_FAILURE
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except CurDistillError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
