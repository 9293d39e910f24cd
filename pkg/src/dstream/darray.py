"""Distributed dense arrays: each PID materializes only its local part.

A :class:`DArray` couples a :class:`~dstream.dmap.Map` with one process's
local buffer, sized to the owned-plus-halo extent.  The global array is
never assembled anywhere; computation follows the owner-computes rule
through :func:`local_view`, and no operation here communicates except
:func:`sync_overlap`, which moves halo values through the runtime's
file-based messaging.

Buffers are 8-byte floats, allocated as one 64-byte-aligned slab.  The
zero fill is performed by the same slice decomposition (and optionally
the same thread count) that later runs the kernels, so first-touch page
placement matches the compute threads.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

from . import dmap, runtime
from .dmap import DimensionTooSmall, Map, NotLocal  # noqa: F401  (re-exported errors)
from .stream import thread_slices

_ALIGNMENT = 64

_next_tag = itertools.count()


class AllocationFailure(Exception):
    """Local buffer allocation failed.

    Carries the requested byte count so oversubscription is diagnosable
    from the message alone.
    """

    def __init__(self, nbytes: int):
        super().__init__(f"could not allocate local buffer of {nbytes} bytes")
        self.nbytes = nbytes


class ChecksumMismatch(Exception):
    """Halo payload arrived corrupted or mis-sized."""


def _aligned_empty(shape) -> np.ndarray:
    """Uninitialized float64 array whose data pointer is 64-byte aligned."""
    # Python ints cannot overflow, so absurd requests still report the
    # true byte count instead of wrapping
    nbytes = math.prod(shape) * 8
    try:
        raw = np.empty(nbytes + _ALIGNMENT, dtype=np.uint8)
    except (MemoryError, ValueError, OverflowError):
        raise AllocationFailure(nbytes) from None
    offset = (-raw.ctypes.data) % _ALIGNMENT
    return raw[offset : offset + nbytes].view(np.float64).reshape(shape)


class DArray:
    """One process's piece of a distributed 2-D array of 8-byte floats.

    Confined to its owning process; within it, disjoint slices of the
    owned view may be touched concurrently, but the structure itself is
    not synchronized.  All PIDs of a run must create their DArrays in the
    same order (SPMD discipline) so the automatically assigned ``tag``
    agrees across processes during halo synchronization.
    """

    def __init__(self, map: Map, global_dims, pid: int, local: np.ndarray,
                 extent: dmap.LocalExtent, tag: str):
        self.map = map
        self.global_dims = tuple(int(n) for n in global_dims)
        self.pid = pid
        self.local = local
        self.extent = extent
        self.tag = tag
        self._sync_seq = 0

    @property
    def element_count_local(self) -> int:
        """Number of owned (non-halo) elements on this PID."""
        return int(np.prod(self.extent.owned_shape, dtype=np.int64))


def zeros(global_dims, map: Map, pid: int, threads: int = 1,
          tag: str = None) -> DArray:
    """Allocate this PID's zero-filled local part of a global array.

    Only the owned-plus-halo extent is materialized.  ``threads`` fills
    the buffer in the kernel slice decomposition for first-touch page
    placement.  ``tag`` names the array in halo-sync message files; the
    default counter works when all PIDs create arrays in the same order,
    pass it explicitly when simulating several PIDs in one process.
    """
    extent = dmap.local_extent(map, global_dims, pid)
    buf = _aligned_empty(extent.shape)
    _parallel_fill(buf, 0.0, threads)
    if tag is None:
        tag = f"a{next(_next_tag)}"
    return DArray(map, global_dims, pid, buf, extent, tag=tag)


def _parallel_fill(buf: np.ndarray, value: float, threads: int) -> None:
    if threads <= 1 or buf.size == 0:
        buf[...] = value
        return
    workers = []
    for ix in thread_slices(buf.shape, threads):
        view = buf[ix]
        th = threading.Thread(target=view.__setitem__, args=(Ellipsis, value))
        th.start()
        workers.append(th)
    for th in workers:
        th.join()


def local_view(arr: DArray) -> np.ndarray:
    """Mutable view of exactly the owned extent (halo excluded).

    Writing through the view touches only local memory; no communication
    can occur.
    """
    owned = arr.extent.owned_shape
    return arr.local[tuple(slice(0, n) for n in owned)]


def fill(arr: DArray, scalar: float) -> None:
    """Set every local element (halo included) to ``scalar``."""
    arr.local[...] = float(scalar)


def checksum(arr: DArray) -> float:
    """Sum of the owned elements; halo values never participate."""
    return float(np.sum(local_view(arr)))


def sync_overlap(arr: DArray, ps: "runtime.ProcSet", timeout: float = 60.0) -> None:
    """Refresh halo elements from the PIDs that own those global indices.

    Collective: every PID of the map must call this on its piece of the
    same array, in the same order.  Values travel through the runtime's
    message files; a no-op when the map has no overlap.
    """
    m = arr.map
    if all(o == 0 for o in m.overlap):
        return
    seq = arr._sync_seq
    arr._sync_seq += 1

    # Publish, per overlapping dimension, the owned-prefix slab any
    # downstream halo can need: depth min(o, owned) along that dimension,
    # full owned extent along the others.
    owned = local_view(arr)
    for d, o in enumerate(m.overlap):
        if o == 0:
            continue
        ix = [slice(None)] * m.ndim
        ix[d] = slice(0, min(o, arr.extent.owned[d].size))
        payload = np.ascontiguousarray(owned[tuple(ix)]).tobytes()
        runtime.post_message(ps, _phase(arr, seq, d), payload)

    slabs: dict[tuple[int, int], np.ndarray] = {}
    for lidx in _halo_local_indices(arr.extent):
        gidx = tuple(
            arr.extent.with_overlap[d].to_global(lidx[d]) for d in range(m.ndim)
        )
        src = dmap.owner(m, arr.global_dims, gidx)
        src_ext = dmap.local_extent(m, arr.global_dims, src)
        d = _slab_dim(m, gidx, src_ext)
        key = (src, d)
        if key not in slabs:
            slabs[key] = _fetch_slab(arr, ps, seq, src, d, src_ext, timeout)
        offs = tuple(src_ext.owned[e].to_local(gidx[e]) for e in range(m.ndim))
        arr.local[lidx] = slabs[key][offs]


def _phase(arr: DArray, seq: int, dim: int) -> str:
    return f"{arr.tag}.s{seq}.d{dim}"


def _halo_local_indices(extent: dmap.LocalExtent):
    """Local indices of the halo: the with-overlap box minus the owned box."""
    full = extent.shape
    own = extent.owned_shape
    # right-halo only, so the halo is the union of two rectangles
    rects = [
        ((0, full[0]), (own[1], full[1])),
        ((own[0], full[0]), (0, own[1])),
    ]
    for (r0, r1), (c0, c1) in rects:
        for r in range(r0, r1):
            for c in range(c0, c1):
                yield (r, c)


def _slab_dim(m: Map, gidx, src_ext: dmap.LocalExtent) -> int:
    # The halo reaches at most overlap[d] past an owner's start in some
    # overlapping dimension d; pick the first such dimension.
    for d, o in enumerate(m.overlap):
        if o == 0:
            continue
        off = src_ext.owned[d].to_local(gidx[d])
        if off < o:
            return d
    raise AssertionError(f"halo index {gidx} beyond every owner slab")


def _fetch_slab(arr, ps, seq, src, d, src_ext, timeout) -> np.ndarray:
    try:
        payload = runtime.fetch_message(ps, _phase(arr, seq, d), src, timeout=timeout)
    except runtime.CorruptPayload as e:
        raise ChecksumMismatch(str(e)) from e
    shape = list(src_ext.owned_shape)
    shape[d] = min(arr.map.overlap[d], shape[d])
    expect = int(np.prod(shape, dtype=np.int64)) * 8
    if len(payload) != expect:
        raise ChecksumMismatch(
            f"halo slab from pid {src} is {len(payload)} bytes, expected {expect}"
        )
    return np.frombuffer(payload, dtype=np.float64).reshape(shape)
