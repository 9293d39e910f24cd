#!/usr/bin/env python3
"""Single-process benchmark demo using the library directly (no launcher).

Allocates three vectors, runs the four kernels, validates against the
closed-form finals, and prints per-kernel bandwidth.

    python3 scripts/serial_demo.py --n 2**24 --nt 10
"""

import argparse
import sys

from dstream import (StreamParams, bandwidths, checksum, dmap, local_view,
                     run_kernels, validate)
from dstream import darray


def parse_size(text: str) -> int:
    # accept plain ints and 2**k spellings
    if "**" in text:
        base, exp = text.split("**")
        return int(base) ** int(exp)
    return int(text)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=parse_size, default=2 ** 24)
    ap.add_argument("--nt", type=int, default=10)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    m = dmap.serial_map()
    params = StreamParams(n_global=args.n, n_trials=args.nt,
                          threads=args.threads)
    dims = (1, args.n)
    a = darray.zeros(dims, m, 0, threads=args.threads)
    b = darray.zeros(dims, m, 0, threads=args.threads)
    c = darray.zeros(dims, m, 0, threads=args.threads)
    darray.fill(a, params.a0)
    darray.fill(b, params.b0)
    darray.fill(c, params.c0)

    av, bv, cv = (local_view(x) for x in (a, b, c))
    times = run_kernels(av, bv, cv, params)
    verdict = validate(av, bv, cv, params)
    bw = bandwidths(times, args.n, args.nt)

    print(f"n={args.n}  nt={args.nt}  threads={args.threads}")
    print(f"validated: {verdict.passed}  (tolerance {verdict.tolerance:.3g})")
    gib = 2.0 ** 30
    for name, t, rate in (("copy", times.t_copy, bw.bw_copy),
                          ("scale", times.t_scale, bw.bw_scale),
                          ("add", times.t_add, bw.bw_add),
                          ("triad", times.t_triad, bw.bw_triad)):
        print(f"  {name:<6} {t:8.4f} s   {rate / gib:8.2f} GiB/s")
    print(f"checksum(a) = {checksum(a)!r}")
    return 0 if verdict.passed else 1


if __name__ == "__main__":
    sys.exit(main())
