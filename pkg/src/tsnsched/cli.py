"""``tsnsched`` command line: one binary, one subcommand per experiment mode."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import EXIT_INPUT, MODES, InputError, dispatch, load_config, run_parallel


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsnsched", description="TSN gate scheduling and flow admission.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        s = sub.add_parser(mode)
        s.add_argument("--config", help="JSON config file; flags override its values")
        s.add_argument("--topology")
        s.add_argument("--flows")
        s.add_argument("--mix", help="flow mix CSV for dynamic requests")
        s.add_argument("--seed", type=int)
        s.add_argument("--stream-seed", type=int, help="seed of the flow arrival stream")
        s.add_argument("--omega", type=int, help="gate entries per egress port")
        s.add_argument("--rate-bps", type=int, help="override every link rate")
        s.add_argument("--guard-band-ns", type=int)
        s.add_argument("--output", "-o")
        if mode == "simulate":
            s.add_argument("--gcl", help="GCL CSV; solved statically when omitted")
            s.add_argument("--offsets", help="dispatch offsets JSON (schedule JSON works)")
            s.add_argument("--horizon", type=int, help="hyperperiods to simulate")
            s.add_argument("--trace", action="store_true", default=None)
        if mode in ("train", "baseline-ddpg", "evaluate"):
            s.add_argument("--epochs", type=int)
            s.add_argument("--eval-window", type=int, help="hyperperiods simulated per step")
            s.add_argument("--max-requests", type=int)
            s.add_argument("--decision-log", action="store_true", default=None)
        if mode in ("train", "baseline-ddpg"):
            s.add_argument("--checkpoint-every", type=int)
            s.add_argument("--warmup", type=int)
            s.add_argument("--batch-size", type=int)
            s.add_argument("--parallel-seeds", type=int, default=1)
        if mode == "evaluate":
            s.add_argument("--checkpoint", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose", "parallel_seeds")}
    try:
        cfg = load_config(args.config, **overrides)
    except (InputError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    k = getattr(args, "parallel_seeds", 1) or 1
    if k > 1:
        return run_parallel(cfg, k)
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
