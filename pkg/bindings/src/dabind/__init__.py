"""Minimal distributed-array surface over the dstream core.

Two parallel constructs carry the whole programming model: ``dmap``
describes how a matrix is split across processes, and ``local``
extracts this process's piece as a plain numpy array. Everything else
a benchmark script does (arithmetic, timing) is ordinary numpy. A
third helper, ``run_stream``, packages the four-kernel bandwidth
benchmark with validation so scripts don't re-derive the formulas.

Which process "this process" is comes from the launcher environment
(``DSTREAM_PID`` / ``DSTREAM_NP`` / ``DSTREAM_THREADS``, re-exported
here as ``ENV_PID`` etc.), so the same script runs serially or under
``dstream.runtime.launch`` unchanged. Without those variables the
surface defaults to one process, pid 0.
"""

import os
from dataclasses import dataclass

import numpy as np

from dstream import darray as _darray
from dstream import dmap as _dmap
from dstream import stream as _stream

# errors keep their primary names so failures look identical on both
# sides of the boundary
from dstream.darray import AllocationFailure
from dstream.dmap import (DimensionTooSmall, DistSpec, DuplicatePid,
                          GridPidMismatch, IndexOutOfBounds,
                          LocalIndexOutOfBounds, MapError, NotLocal,
                          OverlapOnNonBlock, RankMismatch, UnknownPid)
from dstream.stream import (DEFAULT_Q, LengthMismatch, StreamError,
                            StreamParams, ZeroTime)

__version__ = "0.1.0"

# worker-contract environment variables, exactly as the launcher sets
# them for each rank
ENV_PID = "DSTREAM_PID"
ENV_NP = "DSTREAM_NP"
ENV_COMM_DIR = "DSTREAM_COMM_DIR"
ENV_RUN_ID = "DSTREAM_RUN_ID"
ENV_THREADS = "DSTREAM_THREADS"
WORKER_ENV = (ENV_PID, ENV_NP, ENV_COMM_DIR, ENV_RUN_ID, ENV_THREADS)

# local() hands out numpy views; the buffer protocol makes them
# zero-copy in this host language, so the copy fallback never engages
VIEW_MODE = "zero-copy"


def proc_id() -> int:
    """This process's rank, from the launcher environment (0 serially)."""
    return int(os.environ.get(ENV_PID, "0"))


def num_procs() -> int:
    """Total ranks in the run, from the launcher environment (1 serially)."""
    return int(os.environ.get(ENV_NP, "1"))


def num_threads() -> int:
    return int(os.environ.get(ENV_THREADS, "1"))


@dataclass(frozen=True)
class BoundMap:
    """Opaque handle to a core map."""

    handle: _dmap.Map


@dataclass(frozen=True)
class BoundDArray:
    """Opaque handle to this rank's piece of a distributed matrix."""

    handle: _darray.DArray
    view_mode: str = VIEW_MODE


def _as_dist(entry) -> DistSpec:
    if isinstance(entry, DistSpec):
        return entry
    if isinstance(entry, str):
        name = entry.lower()
        if name == "block":
            return DistSpec.block()
        if name == "cyclic":
            return DistSpec.cyclic()
        raise MapError(f"unknown distribution {entry!r}")
    if isinstance(entry, (tuple, list)):
        name = str(entry[0]).lower()
        if name == "cyclic" and len(entry) == 1:
            return DistSpec.cyclic()
        if name == "blockcyclic" and len(entry) == 2:
            return DistSpec.block_cyclic(int(entry[1]))
        if name == "block" and len(entry) == 1:
            return DistSpec.block()
    raise MapError(f"cannot interpret distribution entry {entry!r}")


def dmap(grid, spec, pids) -> BoundMap:
    """Describe how a 2-D matrix is split over processes.

    ``grid`` gives processes per dimension, e.g. ``[1, 4]`` splits
    columns four ways. ``spec`` is ``{}`` for block everywhere, or a
    dict from dimension index to ``"block"`` / ``"cyclic"`` /
    ``("blockcyclic", width)`` / DistSpec. ``pids`` lists the ranks in
    grid order.
    """
    grid = [int(g) for g in grid]
    if not spec:
        dists = None
    elif isinstance(spec, dict):
        dists = [_as_dist(spec[d]) if d in spec else DistSpec.block()
                 for d in range(len(grid))]
    else:
        entries = list(spec)
        if len(entries) != len(grid):
            raise RankMismatch(
                f"spec has {len(entries)} entries for a rank-{len(grid)} grid")
        dists = [_as_dist(e) for e in entries]
    return BoundMap(_dmap.new_map(grid, dists=dists, pids=list(pids)))


def zeros(rows, cols, map) -> BoundDArray:
    """Allocate this rank's zero-filled piece of a rows x cols matrix."""
    if not isinstance(map, BoundMap):
        raise TypeError(f"map must be a BoundMap, got {type(map).__name__}")
    arr = _darray.zeros((int(rows), int(cols)), map.handle, proc_id(),
                        threads=num_threads())
    return BoundDArray(arr)


def local(darr) -> np.ndarray:
    """This rank's owned cells as a writable numpy view (no copy)."""
    if not isinstance(darr, BoundDArray):
        raise TypeError(
            f"local expects a BoundDArray, got {type(darr).__name__}")
    return _darray.local_view(darr.handle)


@dataclass(frozen=True)
class RankRecord:
    """One rank's benchmark outcome."""

    pid: int
    n_procs: int
    local_elements: int
    times: _stream.StreamTimes
    bandwidths: _stream.Bandwidths
    validation: _stream.ValidationReport
    view_mode: str


def run_stream(params: StreamParams, arrays=None) -> RankRecord:
    """Run the copy/scale/add/triad benchmark on this rank.

    With ``arrays=(a, b, c)`` the kernels run in place on those local
    views (they must already hold ``a0``/``b0``/``c0``); otherwise the
    vectors are allocated here from a block map over ``num_procs()``
    ranks. Returns timings, bandwidths, and the validation verdict for
    this rank's elements.
    """
    if params.n_trials < 1:
        raise StreamError(
            f"n_trials must be positive to benchmark, got {params.n_trials}")
    if arrays is None:
        m = dmap([1, num_procs()], {}, range(num_procs()))
        a = local(zeros(1, params.n_global, m))
        b = local(zeros(1, params.n_global, m))
        c = local(zeros(1, params.n_global, m))
        a += params.a0
        b += params.b0
        c += params.c0
    else:
        a, b, c = arrays
    times = _stream.run_kernels(a, b, c, params)
    verdict = _stream.validate(a, b, c, params)
    bw = _stream.bandwidths(times, a.size, params.n_trials)
    return RankRecord(pid=proc_id(), n_procs=num_procs(),
                      local_elements=int(a.size), times=times,
                      bandwidths=bw, validation=verdict,
                      view_mode=VIEW_MODE)


__all__ = [
    "BoundMap", "BoundDArray", "RankRecord",
    "dmap", "zeros", "local", "run_stream",
    "proc_id", "num_procs", "num_threads",
    "ENV_PID", "ENV_NP", "ENV_COMM_DIR", "ENV_RUN_ID", "ENV_THREADS",
    "WORKER_ENV", "VIEW_MODE",
    "StreamParams", "DEFAULT_Q", "DistSpec",
    "MapError", "GridPidMismatch", "DuplicatePid", "OverlapOnNonBlock",
    "RankMismatch", "UnknownPid", "DimensionTooSmall", "IndexOutOfBounds",
    "NotLocal", "LocalIndexOutOfBounds", "AllocationFailure",
    "StreamError", "LengthMismatch", "ZeroTime",
]
