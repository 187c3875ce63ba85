"""Command-line entry point: one subcommand per stage plus full-experiment."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as cfgmod
from .pipeline import STAGES, Pipeline, format_table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milab", description="Model-inversion attack lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--single-worker", action="store_true", help="one BLAS thread; bitwise repeatable")
    common.add_argument("--variant", choices=cfgmod.VARIANTS, help="identity loss variant")
    common.add_argument("--attack", choices=cfgmod.ATTACKS, help="kedmi (Gaussian latent) or gmi (point latent)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. inversion.iterations=300")
    common.add_argument("-v", "--verbose", action="store_true")

    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("full-experiment", parents=[common], help="all stages for all four variants")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def resolve_config(args) -> dict:
    overrides = [cfgmod.parse_override(s) for s in args.set]
    for flag in ("seed", "out", "variant", "attack"):
        value = getattr(args, flag)
        if value is not None:
            overrides.append((flag, value))
    return cfgmod.load(args.config, overrides)


def _error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("stage", "path", "field", "iteration", "breakdown"):
        if hasattr(exc, attr):
            payload[attr] = getattr(exc, attr)
    return payload


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = resolve_config(args)
        if args.command == "show-config":
            print(json.dumps(config, indent=2, sort_keys=True))
            return 0
        pipe = Pipeline(config, single_worker=args.single_worker)
        if args.command == "full-experiment":
            rows = pipe.full_experiment()
            print(format_table(rows), end="")
        else:
            result = pipe.run_stage(args.command)
            status = "cached" if result.cached else "done"
            print(json.dumps({"stage": result.stage, "status": status, "outputs": result.outputs}))
        return 0
    except cfgmod.ConfigError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes machine-readable JSON
        print(json.dumps(_error_payload(exc), default=str), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
