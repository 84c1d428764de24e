"""Command-line interface for the compression pipeline.

Exit codes: 0 success, 2 configuration errors, 3 infeasible ratio budgets,
4 artifact/file I/O problems, 5 when every site in a compression run fails.
"""

from __future__ import annotations

import argparse
import json
import sys

from .exceptions import (
    AllSitesFailed,
    ArtifactError,
    ConfigError,
    InfeasibleBudget,
    LrfError,
)
from .pipeline import (
    RunConfig,
    cmd_allocate,
    cmd_bench,
    cmd_calibrate,
    cmd_compress,
    cmd_evaluate,
    cmd_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
EXIT_ALL_FAILED = 5

_STAGES = {
    "calibrate": cmd_calibrate,
    "allocate": cmd_allocate,
    "compress": cmd_compress,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrf",
        description="Activation-aware low-rank compression of dense weight matrices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "calibrate": "generate calibration data and accumulate per-site Grams",
        "allocate": "score sites and emit the per-site ratio plan",
        "compress": "factor every site according to the plan",
        "evaluate": "score the compressed model and write summary/CSV reports",
        "bench": "run the full pipeline once and record per-stage timings",
        "run": "calibrate, allocate, compress and evaluate in one go",
    }
    for name, desc in descriptions.items():
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--ratio", type=float, help="override the target compression ratio")
        p.add_argument(
            "--engine",
            choices=("plain", "cholesky", "double_svd", "admm_noise"),
            help="override the truncation engine",
        )
        p.add_argument(
            "--allocation",
            choices=("heterogeneous", "homogeneous"),
            help="override the budget allocation mode",
        )
        p.add_argument(
            "--refine",
            action="store_true",
            default=None,
            help="polish factors with the quasi-Newton refinement stage",
        )
        p.add_argument("--out", metavar="DIR", help="override the output directory")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    override = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                override = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config!r} is not valid JSON: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config document must be a JSON object")
    if args.seed is not None:
        override["seed"] = args.seed
    if args.ratio is not None:
        override["ratio"] = args.ratio
    if args.engine is not None:
        override["engine"] = args.engine
    if args.allocation is not None:
        override["allocation"] = args.allocation
    if args.refine is not None:
        override["refine"] = args.refine
    if args.out is not None:
        override["out_dir"] = args.out
    return RunConfig.from_dict(override)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        result = _STAGES[args.command](config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudget as exc:
        print(f"error: infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ArtifactError, OSError) as exc:
        print(f"error: artifact I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except AllSitesFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    except LrfError as exc:
        # Anything else from the numerics is a configuration-level problem
        # at the CLI boundary (bad combination of engine and data).
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, sort_keys=True, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
