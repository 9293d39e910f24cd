"""Parallel maps: how array dimensions are divided among process IDs.

A :class:`Map` pairs a processor grid with a per-dimension distribution
rule (block, cyclic, or block-cyclic), an ordered PID list, and an
optional overlap (halo) width for block dimensions.  All global<->local
index arithmetic lives here.  Maps are immutable values and every
function in this module is pure, so maps can be shared across threads
without synchronization.

Conventions (fixed for this library):

* PIDs are linearized over the grid in row-major order of the ``pids``
  list, i.e. ``pids[r * grid[1] + c]`` sits at grid coordinate ``(r, c)``.
* Block remainders: slot ``k`` of ``p`` owns ``[k*ceil(n/p),
  min((k+1)*ceil(n/p), n))``; trailing slots may come up empty.
* The overlap halo extends toward higher indices only, clipped at the
  dimension size, and is defined only for block-distributed dimensions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

RANK = 2  # row vectors are 1 x N; all index math is written per-dimension


class MapError(Exception):
    """Base class for map construction and indexing errors."""


class GridPidMismatch(MapError):
    """product(grid) does not equal the number of PIDs."""


class DuplicatePid(MapError):
    """The PID list contains a repeated entry."""


class OverlapOnNonBlock(MapError):
    """Overlap requested on a dimension that is not block-distributed."""


class RankMismatch(MapError):
    """grid/dists/overlap lengths disagree or are not rank 2."""


class UnknownPid(MapError):
    """PID is not a member of the map."""


class DimensionTooSmall(MapError):
    """A global dimension is smaller than the grid along it."""


class IndexOutOfBounds(MapError):
    """Global index lies outside the global dimensions."""


class NotLocal(MapError):
    """The index is not stored on this PID; access would need communication."""


class LocalIndexOutOfBounds(MapError):
    """Local index lies outside this PID's local extent."""


class DistKind(enum.Enum):
    BLOCK = "block"
    CYCLIC = "cyclic"
    BLOCK_CYCLIC = "blockcyclic"


@dataclass(frozen=True)
class DistSpec:
    """Distribution rule for one array dimension.

    ``block_size`` is meaningful only for ``BLOCK_CYCLIC`` and must be
    at least 1 there; it is ignored for the other kinds.
    """

    kind: DistKind = DistKind.BLOCK
    block_size: int = 1

    def __post_init__(self):
        if self.kind is DistKind.BLOCK_CYCLIC and self.block_size < 1:
            raise MapError("block_size must be >= 1 for block-cyclic")

    @staticmethod
    def block() -> "DistSpec":
        return DistSpec(DistKind.BLOCK)

    @staticmethod
    def cyclic() -> "DistSpec":
        return DistSpec(DistKind.CYCLIC)

    @staticmethod
    def block_cyclic(block_size: int) -> "DistSpec":
        return DistSpec(DistKind.BLOCK_CYCLIC, block_size)


@dataclass(frozen=True)
class Map:
    """How an array's dimensions are divided among PIDs.

    Construct through :func:`new_map`, which validates the invariants.
    """

    grid: tuple[int, ...]
    dists: tuple[DistSpec, ...]
    pids: tuple[int, ...]
    overlap: tuple[int, ...]

    @property
    def ndim(self) -> int:
        return len(self.grid)

    @property
    def np(self) -> int:
        return len(self.pids)


@dataclass(frozen=True)
class DimExtent:
    """The set of global indices one grid slot holds along one dimension.

    Stored as ``count`` blocks of ``block`` consecutive indices whose
    starts are ``stride`` apart, beginning at ``start``; the final block
    may be shorter (``tail`` elements).  A contiguous range is the
    single-block special case.  Local indices enumerate the set in
    ascending global order.
    """

    start: int
    stride: int
    block: int
    count: int
    tail: int

    @property
    def size(self) -> int:
        if self.count == 0:
            return 0
        return (self.count - 1) * self.block + self.tail

    def contains(self, g: int) -> bool:
        if self.count == 0 or g < self.start:
            return False
        qb, rb = divmod(g - self.start, self.stride)
        if qb >= self.count:
            return False
        limit = self.tail if qb == self.count - 1 else self.block
        return rb < limit

    def to_local(self, g: int) -> int:
        """Position of global index ``g`` within this extent (must be a member)."""
        qb, rb = divmod(g - self.start, self.stride)
        return qb * self.block + rb

    def to_global(self, local: int) -> int:
        qb, rb = divmod(local, self.block)
        return self.start + qb * self.stride + rb

    def global_indices(self) -> np.ndarray:
        """All member global indices, ascending (vectorized enumeration)."""
        if self.count == 0:
            return np.empty(0, dtype=np.intp)
        starts = self.start + np.arange(self.count, dtype=np.intp) * self.stride
        full = starts[:, None] + np.arange(self.block, dtype=np.intp)[None, :]
        flat = full.reshape(-1)
        drop = self.block - self.tail  # short final block
        return flat[: flat.size - drop] if drop else flat


_EMPTY = DimExtent(start=0, stride=1, block=0, count=0, tail=0)


def _contiguous(lo: int, hi: int) -> DimExtent:
    if hi <= lo:
        return _EMPTY
    return DimExtent(start=lo, stride=hi - lo, block=hi - lo, count=1, tail=hi - lo)


@dataclass(frozen=True)
class LocalExtent:
    """Per-dimension index sets one PID holds: owned and owned+halo."""

    owned: tuple[DimExtent, ...]
    with_overlap: tuple[DimExtent, ...]

    @property
    def owned_shape(self) -> tuple[int, ...]:
        return tuple(e.size for e in self.owned)

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the local buffer (owned plus halo)."""
        return tuple(e.size for e in self.with_overlap)


def new_map(grid, dists=None, pids=None, overlap=None) -> Map:
    """Build and validate a parallel map.

    Parameters
    ----------
    grid : sequence of int
        Processor counts per dimension (rank 2).
    dists : sequence of DistSpec, optional
        Distribution per dimension; defaults to block everywhere (the
        empty-spec convention).
    pids : sequence of int
        Ordered distinct non-negative process IDs; ``product(grid)`` many.
    overlap : sequence of int, optional
        Halo width per dimension; nonzero only on block dimensions.
        Defaults to all zeros.
    """
    grid = tuple(int(g) for g in grid)
    if dists is None:
        dists = tuple(DistSpec.block() for _ in grid)
    else:
        dists = tuple(dists)
    if overlap is None:
        overlap = tuple(0 for _ in grid)
    else:
        overlap = tuple(int(o) for o in overlap)
    if pids is None:
        raise MapError("pids is required")
    pids = tuple(int(p) for p in pids)

    if not (len(grid) == len(dists) == len(overlap) == RANK):
        raise RankMismatch(
            f"grid/dists/overlap must all have rank {RANK}, got "
            f"{len(grid)}/{len(dists)}/{len(overlap)}"
        )
    if any(g < 1 for g in grid):
        raise MapError(f"grid entries must be positive, got {grid}")
    if math.prod(grid) != len(pids):
        raise GridPidMismatch(f"grid {grid} needs {math.prod(grid)} pids, got {len(pids)}")
    if len(set(pids)) != len(pids):
        raise DuplicatePid(f"pid list has duplicates: {pids}")
    if any(p < 0 for p in pids):
        raise MapError(f"pids must be non-negative, got {pids}")
    for d, (spec, o) in enumerate(zip(dists, overlap)):
        if not isinstance(spec, DistSpec):
            raise MapError(f"dists[{d}] is not a DistSpec")
        if o < 0:
            raise MapError(f"overlap[{d}] must be non-negative")
        if o > 0 and spec.kind is not DistKind.BLOCK:
            raise OverlapOnNonBlock(f"overlap[{d}]={o} on {spec.kind.value} dimension")
    return Map(grid=grid, dists=dists, pids=pids, overlap=overlap)


def serial_map() -> Map:
    """The 1x1 map: every index owned by PID 0."""
    return new_map([1, 1], pids=[0])


def grid_coords(m: Map, pid: int) -> tuple[int, ...]:
    """Grid coordinates of ``pid``: row-major inverse over the pids list."""
    try:
        idx = m.pids.index(pid)
    except ValueError:
        raise UnknownPid(f"pid {pid} not in map") from None
    coords = []
    for extent in reversed(m.grid):
        idx, c = divmod(idx, extent)
        coords.append(c)
    return tuple(reversed(coords))


def _linearize(m: Map, coords) -> int:
    idx = 0
    for c, extent in zip(coords, m.grid):
        idx = idx * extent + c
    return idx


def _dim_slot_extents(spec: DistSpec, n: int, p: int, k: int, o: int):
    """(owned, with_overlap) extents for grid slot k of p along a size-n dim."""
    if spec.kind is DistKind.BLOCK:
        c = -(-n // p)  # ceil(n / p)
        lo = min(k * c, n)
        hi = min((k + 1) * c, n)
        owned = _contiguous(lo, hi)
        halo = _contiguous(lo, min(hi + o, n))
        return owned, halo
    if spec.kind is DistKind.CYCLIC:
        count = -(-(n - k) // p) if k < n else 0
        owned = DimExtent(start=k, stride=p, block=1, count=count, tail=1) if count else _EMPTY
        return owned, owned
    # block-cyclic: slot k owns blocks b*(m*p + k) for m = 0, 1, ...
    b = spec.block_size
    nblocks = -(-n // b)
    count = -(-(nblocks - k) // p) if k < nblocks else 0
    if count == 0:
        return _EMPTY, _EMPTY
    last = ((count - 1) * p + k) * b
    tail = min(last + b, n) - last
    owned = DimExtent(start=k * b, stride=p * b, block=b, count=count, tail=tail)
    return owned, owned


def local_extent(m: Map, global_dims, pid: int) -> LocalExtent:
    """This PID's owned and owned+halo index sets for an array of ``global_dims``."""
    coords = grid_coords(m, pid)
    global_dims = tuple(int(n) for n in global_dims)
    if len(global_dims) != m.ndim:
        raise RankMismatch(f"global_dims rank {len(global_dims)} != map rank {m.ndim}")
    for d, (n, p) in enumerate(zip(global_dims, m.grid)):
        if n < p:
            raise DimensionTooSmall(f"dim {d}: size {n} < grid {p}")
    owned = []
    halo = []
    for d in range(m.ndim):
        ow, wo = _dim_slot_extents(
            m.dists[d], global_dims[d], m.grid[d], coords[d], m.overlap[d]
        )
        owned.append(ow)
        halo.append(wo)
    return LocalExtent(owned=tuple(owned), with_overlap=tuple(halo))


def _owner_slot(spec: DistSpec, n: int, p: int, g: int) -> int:
    if spec.kind is DistKind.BLOCK:
        return g // (-(-n // p))
    if spec.kind is DistKind.CYCLIC:
        return g % p
    return (g // spec.block_size) % p


def owner(m: Map, global_dims, global_index) -> int:
    """The unique PID whose owned (non-halo) extent contains ``global_index``."""
    global_dims = tuple(int(n) for n in global_dims)
    gidx = tuple(int(g) for g in global_index)
    if len(gidx) != m.ndim:
        raise RankMismatch(f"index rank {len(gidx)} != map rank {m.ndim}")
    for d, (g, n) in enumerate(zip(gidx, global_dims)):
        if not 0 <= g < n:
            raise IndexOutOfBounds(f"index {g} outside [0, {n}) in dim {d}")
    coords = tuple(
        _owner_slot(m.dists[d], global_dims[d], m.grid[d], gidx[d]) for d in range(m.ndim)
    )
    return m.pids[_linearize(m, coords)]


def global_to_local(m: Map, global_dims, pid: int, global_index) -> tuple[int, ...]:
    """Local position of ``global_index`` within ``pid``'s owned+halo extent.

    Raises :class:`NotLocal` when the index is stored elsewhere, i.e. the
    access would require communication.
    """
    ext = local_extent(m, global_dims, pid)
    gidx = tuple(int(g) for g in global_index)
    for d, (g, n) in enumerate(zip(gidx, global_dims)):
        if not 0 <= g < n:
            raise IndexOutOfBounds(f"index {g} outside [0, {n}) in dim {d}")
    local = []
    for d, g in enumerate(gidx):
        e = ext.with_overlap[d]
        if not e.contains(g):
            raise NotLocal(f"global index {gidx} not stored on pid {pid} (dim {d})")
        local.append(e.to_local(g))
    return tuple(local)


def local_to_global(m: Map, global_dims, pid: int, local_index) -> tuple[int, ...]:
    """Exact inverse of :func:`global_to_local` on the owned+halo extent."""
    ext = local_extent(m, global_dims, pid)
    lidx = tuple(int(i) for i in local_index)
    out = []
    for d, l in enumerate(lidx):
        e = ext.with_overlap[d]
        if not 0 <= l < e.size:
            raise LocalIndexOutOfBounds(f"local index {l} outside [0, {e.size}) in dim {d}")
        out.append(e.to_global(l))
    return tuple(out)


def to_config(m: Map) -> dict:
    """Plain-data form of a map for run-configuration files and reports."""
    return {
        "grid": list(m.grid),
        "dists": [
            {"kind": s.kind.value, "block_size": s.block_size} for s in m.dists
        ],
        "pids": list(m.pids),
        "overlap": list(m.overlap),
    }


def from_config(cfg: dict) -> Map:
    """Inverse of :func:`to_config`; revalidates all invariants."""
    dists = [
        DistSpec(DistKind(d["kind"]), int(d.get("block_size", 1))) for d in cfg["dists"]
    ]
    return new_map(cfg["grid"], dists, cfg["pids"], cfg["overlap"])
