#!/usr/bin/env python3
"""Plot bandwidth versus process count from a sweep CSV.

    python3 -m dstream sweep --np-list 1,2,4 --out runs
    python3 scripts/plot_sweep.py runs/sweep-<id>.csv -o sweep.png
"""

import argparse
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from dstream.report import parse_table


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", help="sweep table (np,...,bw_* columns)")
    ap.add_argument("-o", "--out", default="sweep.png")
    ap.add_argument("--conservative", action="store_true",
                    help="plot max-time aggregates instead of mean-time")
    args = ap.parse_args(argv)

    with open(args.csv) as f:
        rows = parse_table(f.read())
    if not rows:
        print("no data rows in", args.csv, file=sys.stderr)
        return 1

    nps = [r.np for r in rows]
    gib = 2.0 ** 30
    fig, ax = plt.subplots(figsize=(6, 4))
    for op, marker in (("copy", "o"), ("scale", "s"), ("add", "^"),
                       ("triad", "d")):
        field = f"bw_{op}_cons" if args.conservative else f"bw_{op}"
        ax.plot(nps, [getattr(r, field) / gib for r in rows],
                marker=marker, label=op)
    ax.set_xlabel("processes")
    ax.set_ylabel("aggregate bandwidth (GiB/s)")
    ax.set_xscale("log", base=2)
    ax.set_xticks(nps)
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    kind = "conservative" if args.conservative else "mean-time"
    ax.set_title(f"weak scaling, {kind} aggregate")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print("wrote", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
