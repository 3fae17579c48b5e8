"""``bimoe`` command line: scaling, modelsize, breakdown, pipeline, verify.

Exit codes: 0 success, 1 verification failure, 2 invalid config.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .scenarios import (
    default_model_sizes,
    run_breakdown,
    run_model_size_sweep,
    run_pipeline,
    run_scaling,
)
from .verify import format_results, run_verify

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_BAD_CONFIG = 0, 1, 2


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bimoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("-c", "--config", type=Path, help="key = value config file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-o", "--out", type=Path, help="write CSV here instead of stdout")
        return p

    p = scenario("scaling", "throughput vs node count")
    p.add_argument("--scaling", choices=("weak", "strong"))
    p.add_argument("--nodes", type=_int_list, help="e.g. 1,2,4,8,16")
    scenario("modelsize", "3.7B / 13B / 48B model configurations")
    scenario("breakdown", "single-layer time breakdown for both routing modes")
    p = scenario("pipeline", "chunked communication/compute overlap")
    p.add_argument("--chunks", type=_int_list, help="e.g. 1,2,4,8")

    p = sub.add_parser("verify", help="run the built-in property and oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", choices=("tie_break",), help="inject a known bug to exercise the oracles")
    p.add_argument("--only", action="append", help="run just this check (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "verify":
        results = run_verify(args.seed, args.fault, args.only)
        print(format_results(results))
        return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_VERIFY_FAILED

    try:
        cfg = load_config(args.config, args.set)
        if args.command == "scaling":
            text = run_scaling(cfg, args.nodes, args.scaling)
        elif args.command == "modelsize":
            text = run_model_size_sweep(default_model_sizes(cfg))
        elif args.command == "breakdown":
            text = run_breakdown(cfg)
        else:
            text = run_pipeline(cfg, args.chunks)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"bimoe: invalid config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
