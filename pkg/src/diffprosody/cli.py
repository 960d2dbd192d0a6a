"""Command-line entry point: ``diffprosody <subcommand> [flags]``.

Exit status: 0 success, 2 configuration error, 3 data error,
4 numeric divergence.  Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import RunConfig, load_config
from .context import ABLATIONS
from .denoiser import MODES
from .errors import ConfigError, DataError, DivergenceError

SUBCOMMANDS = (
    "gen-data", "train-extractor", "extract-prosody", "train-diffusion",
    "train-baseline", "sample", "eval", "ablate", "report",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON); built-in defaults when omitted")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="diffprosody", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-diffusion", "sample", "eval"):
            p.add_argument("--ablation", choices=ABLATIONS, default="none")
        if name in ("sample", "eval"):
            p.add_argument("--model", choices=MODES, default="diffusion")
        if name == "sample":
            p.add_argument("--count", type=int, help="samples per probe context")
        if name == "eval":
            p.add_argument("--bins", type=int, help="clustering bins (default 20)")
            p.add_argument("--alpha", type=float, help="NDB significance level (default 0.05)")
            p.add_argument("--generated", help="sample block to score instead of the model's own")
            p.add_argument("--ground-truth", dest="truth", help="reference block instead of fresh oracle draws")
            p.add_argument("--no-plots", action="store_true")
        if name == "report":
            p.add_argument("--runs", nargs="+", help="run directories to collate (default: --out)")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def dispatch(args) -> object:
    cmd = args.command
    if cmd == "report":
        return pipeline.report(args.runs or [args.out], args.out)
    cfg = _config(args)
    out = args.out
    if cmd == "gen-data":
        pipeline.gen_data(cfg, out)
    elif cmd == "train-extractor":
        pipeline.run_train_extractor(cfg, out)
    elif cmd == "extract-prosody":
        pipeline.extract_prosody(cfg, out)
    elif cmd == "train-diffusion":
        pipeline.train_predictor(cfg, out, "diffusion", args.ablation)
    elif cmd == "train-baseline":
        pipeline.train_predictor(cfg, out, "baseline", "none")
    elif cmd == "sample":
        pipeline.sample(cfg, out, args.model, args.ablation, args.count)
    elif cmd == "eval":
        res = pipeline.evaluate(cfg, out, args.model, args.ablation, args.bins, args.alpha,
                                generated=args.generated, truth=args.truth, plots=not args.no_plots)
        return {k: res[k] for k in ("run", "mean_jsd", "mean_ndb", "max_ndb")}
    elif cmd == "ablate":
        return pipeline.ablate(cfg, out)
    return None


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        result = dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return DivergenceError.exit_code
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
