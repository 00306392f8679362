"""Run the benchmark and tuning campaigns from configs/ through the CLI.

    python3 scripts/run_experiments.py                 # everything
    python3 scripts/run_experiments.py camelback tune  # a subset
    python3 scripts/run_experiments.py --reps 10 --out results/quick

Each config writes to <out>/<name>/; exit status is the worst CLI status.
"""

import argparse
import sys
import time
from pathlib import Path

from safectrl import cli

CONFIGS = {"camelback": "bench", "hartmann6": "bench", "gaussian10": "bench", "tune": "tune"}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("names", nargs="*", help=f"configs to run, from {', '.join(CONFIGS)} (default: all)")
    p.add_argument("--out", default="results", help="parent output directory")
    p.add_argument("--reps", type=int, help="override repetitions")
    p.add_argument("--seed", type=int, help="override master seed")
    args = p.parse_args(argv)
    unknown = set(args.names) - set(CONFIGS)
    if unknown:
        p.error(f"unknown configs: {', '.join(sorted(unknown))}")

    worst = cli.EXIT_OK
    for name in args.names or list(CONFIGS):
        argv = [CONFIGS[name], "--config", name, "--out", str(Path(args.out) / name)]
        if args.reps is not None:
            argv += ["--reps", str(args.reps)]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        t0 = time.perf_counter()
        code = cli.main(argv)
        print(f"[{name}] exit {code} after {time.perf_counter() - t0:.0f} s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
