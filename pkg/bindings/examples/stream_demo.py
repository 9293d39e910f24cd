#!/usr/bin/env python3
# Whole-benchmark demo: the only parallel constructs are the map and
# the local view; the rest is plain numpy. Runs serially as-is, or one
# copy per rank under dstream.runtime.launch (rank comes from the
# DSTREAM_* environment).
import sys

import numpy as np

import dabind as dab

Nt = 10
N = dab.num_procs() * (2 ** 20)
A0 = 1.0; B0 = 2.0; C0 = 0.0; q = np.sqrt(2) - 1

ABCmap = dab.dmap([1, dab.num_procs()], {}, range(dab.num_procs()))

# allocate the distributed vectors and initialize this rank's parts
Aloc = dab.local(dab.zeros(1, N, map=ABCmap)) + A0
Bloc = dab.local(dab.zeros(1, N, map=ABCmap)) + B0
Cloc = dab.local(dab.zeros(1, N, map=ABCmap)) + C0

# run benchmark
rec = dab.run_stream(dab.StreamParams(n_global=N, n_trials=Nt, q=float(q)),
                     arrays=(Aloc, Bloc, Cloc))

gib = 2.0 ** 30
print(f"pid {rec.pid}/{rec.n_procs}  {rec.local_elements} elements  "
      f"validated: {rec.validation.passed}")
for name, rate in (("copy", rec.bandwidths.bw_copy),
                   ("scale", rec.bandwidths.bw_scale),
                   ("add", rec.bandwidths.bw_add),
                   ("triad", rec.bandwidths.bw_triad)):
    print(f"  {name:<6} {rate / gib:8.2f} GiB/s")
sys.exit(0 if rec.validation.passed else 3)
