"""Distributed arrays with a multi-process STREAM bandwidth harness.

The pieces, bottom up:

- dmap: process grids, per-dimension distributions, and the index math
  mapping global indices to (pid, local index) and back.
- darray: per-process local buffers for a distributed array, with
  owner-computes views and explicit halo synchronization.
- runtime: process identity, launching, barriers, and leader gather over
  atomic file-based messaging.
- stream: the copy/scale/add/triad kernels, timing, analytic validation,
  and bandwidth formulas.
- report: per-rank result aggregation, scaling tables, serialization.
- cli: the `dstream` command (run / sweep / validate / worker).
"""

from .dmap import (
    Map,
    DistKind,
    DistSpec,
    LocalExtent,
    new_map,
    serial_map,
    grid_coords,
    local_extent,
    owner,
    global_to_local,
    local_to_global,
    to_config,
    from_config,
)
from .darray import DArray, zeros, local_view, fill, checksum, sync_overlap
from .runtime import ProcSet, Triples, init, launch, pin, barrier, gather
from .stream import (
    DEFAULT_Q,
    StreamParams,
    StreamTimes,
    Bandwidths,
    ValidationReport,
    run_kernels,
    validate,
    bandwidths,
    serial_oracle,
)
from .report import RankResult, AggregateReport, aggregate, to_table, serialize, deserialize

__version__ = "0.1.0"

__all__ = [
    "Map", "DistKind", "DistSpec", "LocalExtent",
    "new_map", "serial_map", "grid_coords", "local_extent", "owner",
    "global_to_local", "local_to_global", "to_config", "from_config",
    "DArray", "zeros", "local_view", "fill", "checksum", "sync_overlap",
    "ProcSet", "Triples", "init", "launch", "pin", "barrier", "gather",
    "DEFAULT_Q", "StreamParams", "StreamTimes", "Bandwidths",
    "ValidationReport", "run_kernels", "validate", "bandwidths",
    "serial_oracle",
    "RankResult", "AggregateReport", "aggregate", "to_table",
    "serialize", "deserialize",
    "__version__",
]
