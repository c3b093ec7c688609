"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from pydantic import ValidationError

from .config import PRESETS, ExperimentConfig, load_config, preset
from .experiments import run_diagnostics, run_evaluate, run_price, run_train
from .market import ConfigurationError
from .nn import CheckpointError, TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("martingale_cv")


def _common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    src.add_argument("--preset", metavar="NAME", help="named preset, see `presets`")
    p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--threads", type=int, default=1, metavar="N", help="evaluation workers")
    p.add_argument("--epsilon", type=float, metavar="FLOAT", help="override the stopping epsilon")
    p.add_argument("--algo", type=int, choices=range(1, 8), metavar="{1..7}",
                   help="training algorithm 1-7")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="martingale-cv",
        description="Neural martingale control variates for Monte-Carlo option pricing.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a control-variate model")
    _common(p)

    for name, helptext in (("evaluate", "replicated variance-reduction report"),
                           ("price", "plain MC vs CV vs value-network readout")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--model", metavar="PATH", help="model.json or its directory")
        p.add_argument("--exact-margrabe", action="store_true",
                       help="use the closed-form exchange delta instead of a trained model")
        if name == "evaluate":
            p.add_argument("--lambda", dest="lam", type=float, metavar="FLOAT",
                           help="override the control-variate coefficient")

    p = sub.add_parser("diagnose", help="architecture grid against the analytic benchmark")
    _common(p)

    p = sub.add_parser("presets", help="list presets or print one as JSON")
    p.add_argument("name", nargs="?")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        try:
            config = preset(args.preset)
        except KeyError as exc:
            raise ConfigurationError(exc.args[0]) from None
    else:
        raise ConfigurationError("one of --config or --preset is required")
    update = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        update["seed"] = args.seed
    if args.algo is not None:
        update["algorithm"] = args.algo
    if args.epsilon is not None:
        if not args.epsilon > 0:
            raise ConfigurationError("--epsilon must be positive")
        update["train"] = config.train.model_copy(update={"epsilon": args.epsilon})
    if update:
        config = ExperimentConfig.model_validate({**config.model_dump(), **update})
    return config


def _dispatch(args) -> int:
    if args.command == "presets":
        if args.name:
            if args.name not in PRESETS:
                raise ConfigurationError(f"unknown preset {args.name!r}")
            print(json.dumps(preset(args.name).model_dump(mode="json"), indent=2))
        else:
            for name in sorted(PRESETS):
                print(name)
        return EXIT_OK

    config = _resolve_config(args)
    if args.command == "train":
        cv, history = run_train(config, args.out)
        print(f"trained algorithm {config.algorithm}: {history.steps} steps, "
              f"{history.paths} paths, converged={history.converged}")
    elif args.command == "evaluate":
        report, sweep = run_evaluate(config, args.model, args.out, args.exact_margrabe,
                                     args.lam, args.threads)
        print(f"reduction factor {report.reduction_factor:.4g}, "
              f"estimate {report.estimator_mean:.6g} "
              f"[{report.estimator_ci[0]:.6g}, {report.estimator_ci[1]:.6g}]")
    elif args.command == "price":
        result = run_price(config, args.model, args.out, args.exact_margrabe)
        print(f"analytic price {result['analytic_price']:.6g}")
        for row in result["rows"]:
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in row.items()))
    elif args.command == "diagnose":
        rows, _ = run_diagnostics(config, out=args.out)
        print(f"diagnostics: {len(rows)} rows")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return _dispatch(args)
    except (ConfigurationError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
