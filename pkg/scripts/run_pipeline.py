"""Run every CLI stage in order for one config; stops at the first non-zero exit code."""

import argparse
import sys

from diseasemap.cli import main as cli_main

STAGES = ("simulate", "adjacency", "standardize", "screen", "fit", "report")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config")
    ap.add_argument("--skip-simulate", action="store_true", help="use existing input files")
    ap.add_argument("--engine", choices=("laplace", "mcmc"))
    args = ap.parse_args(argv)
    extra = ["--engine", args.engine] if args.engine else []
    for stage in STAGES:
        if stage == "simulate" and args.skip_simulate:
            continue
        print(f"== {stage}", flush=True)
        code = cli_main([stage, "-c", args.config, *(extra if stage == "fit" else [])])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
