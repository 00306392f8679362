"""Plot mean simple regret (shaded: one standard error) from aggregate.csv files.

    python3 scripts/plot_regret.py results/camelback results/hartmann6 -o regret.png
"""

import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_aggregate(run_dir: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rows = defaultdict(list)
    with (run_dir / "aggregate.csv").open() as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            rows[row["method"]].append((int(row["iteration"]), float(row["mean_regret"]), float(row["se_regret"])))
    out = {}
    for method, vals in rows.items():
        vals.sort()
        out[method] = (np.array([v[1] for v in vals]), np.array([v[2] for v in vals]))
    return out


def stage_switch(run_dir: Path) -> int | None:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    return manifest["resolved_config"]["optimizer"].get("stage_switch")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("runs", nargs="+", type=Path, help="output directories of `safectrl bench`")
    p.add_argument("-o", "--output", type=Path, default=Path("regret.png"))
    p.add_argument("--log", action="store_true", help="logarithmic regret axis")
    args = p.parse_args(argv)

    fig, axes = plt.subplots(1, len(args.runs), figsize=(5 * len(args.runs), 4), squeeze=False)
    for ax, run in zip(axes[0], args.runs):
        for method, (mean, se) in read_aggregate(run).items():
            it = np.arange(mean.size)
            ax.plot(it, mean, label=method)
            ax.fill_between(it, mean - se, mean + se, alpha=0.2)
        t0 = stage_switch(run)
        if t0 is not None:
            ax.axvline(t0, color="grey", linestyle=":", linewidth=1)
        ax.set_title(run.name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("simple regret")
        if args.log:
            ax.set_yscale("log")
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
