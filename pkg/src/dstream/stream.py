"""The four memory-bandwidth kernels on local views, with timing and validation.

Per trial the kernels run in a fixed order on equally-shaped views::

    copy:   C = A
    scale:  B = q * C
    add:    C = A + B
    triad:  A = B + q * C

Each kernel is an elementwise pass over the views; with ``threads > 1``
the views are split into contiguous slices and a pool of persistent
worker threads executes every kernel on its own slice, joining at a
barrier before the phase's clock is read.  Results are bitwise identical
for any thread count and any data placement, because every element sees
the same scalar operation sequence.

The triad is executed as two elementwise passes (multiply into the
destination, then add); IEEE rounding makes that bitwise-equal to
evaluating ``B + q*C`` with a temporary, while avoiding per-trial
allocations that would disturb the timings.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

KERNELS = ("copy", "scale", "add", "triad")

#: bytes moved per element per trial under the benchmark's accounting
BYTES_PER_ELEMENT = {"copy": 16, "scale": 16, "add": 24, "triad": 24}

DEFAULT_Q = math.sqrt(2.0) - 1.0  # makes 2q + q^2 == 1, so values stay modest

_ORACLE_MAX_N = 10**6


class StreamError(Exception):
    pass


class LengthMismatch(StreamError):
    """A, B, C views do not have identical shapes."""


class ZeroTime(StreamError):
    """A kernel time of zero (or less) cannot be converted to a bandwidth."""


@dataclass(frozen=True)
class StreamParams:
    """Benchmark configuration for one run."""

    n_global: int
    n_trials: int = 10
    q: float = DEFAULT_Q
    a0: float = 1.0
    b0: float = 2.0
    c0: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.n_global < 1:
            raise StreamError(f"n_global must be positive, got {self.n_global}")
        if self.n_trials < 0:
            raise StreamError(f"n_trials must be non-negative, got {self.n_trials}")
        if self.threads < 1:
            raise StreamError(f"threads must be positive, got {self.threads}")


@dataclass
class StreamTimes:
    """Seconds per kernel, accumulated over all trials."""

    t_copy: float = 0.0
    t_scale: float = 0.0
    t_add: float = 0.0
    t_triad: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "copy": self.t_copy,
            "scale": self.t_scale,
            "add": self.t_add,
            "triad": self.t_triad,
        }

    def copy(self) -> "StreamTimes":
        return StreamTimes(self.t_copy, self.t_scale, self.t_add, self.t_triad)


@dataclass(frozen=True)
class Bandwidths:
    """Bytes per second per kernel."""

    bw_copy: float
    bw_scale: float
    bw_add: float
    bw_triad: float

    def as_dict(self) -> dict[str, float]:
        return {
            "copy": self.bw_copy,
            "scale": self.bw_scale,
            "add": self.bw_add,
            "triad": self.bw_triad,
        }


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    max_rel_err_a: float
    max_rel_err_b: float
    max_rel_err_c: float
    tolerance: float


def validation_tolerance(n_trials: int) -> float:
    """Max relative error allowed after ``n_trials`` iterations.

    2q + q^2 equals 1 only to rounding, so the drift bound scales with
    the trial count; the floor keeps tiny runs from demanding exactness.
    """
    eps = float(np.finfo(np.float64).eps)
    return max(1e-10, 20.0 * n_trials * eps)


def thread_slices(shape, nthreads: int) -> list[tuple[slice, ...]]:
    """Split a view's shape into ``nthreads`` contiguous slices.

    The split runs along the longest axis in ceil-sized chunks (the same
    remainder convention as block distribution); trailing slices may be
    empty.  Used both for kernel execution and for first-touch fills so
    page placement matches the threads that later run the kernels.
    """
    axis = max(range(len(shape)), key=lambda d: shape[d])
    n = shape[axis]
    chunk = -(-n // nthreads) if n else 0
    out = []
    for t in range(nthreads):
        lo = min(t * chunk, n)
        hi = min((t + 1) * chunk, n)
        ix = [slice(None)] * len(shape)
        ix[axis] = slice(lo, hi)
        out.append(tuple(ix))
    return out


def _phase_copy(a, b, c, q):
    np.copyto(c, a)


def _phase_scale(a, b, c, q):
    np.multiply(c, q, out=b)


def _phase_add(a, b, c, q):
    np.add(a, b, out=c)


def _phase_triad(a, b, c, q):
    np.multiply(c, q, out=a)
    np.add(a, b, out=a)


_PHASES = (_phase_copy, _phase_scale, _phase_add, _phase_triad)


def run_kernels(a, b, c, params: StreamParams, on_trial=None) -> StreamTimes:
    """Run all four kernels ``params.n_trials`` times on views a, b, c.

    The views must have identical shapes (identical maps).  Each phase
    fully completes -- all worker threads joined, all stores visible --
    before its clock is read.  ``on_trial``, when given, receives a
    snapshot of the accumulated times after every trial.
    """
    if not (a.shape == b.shape == c.shape):
        raise LengthMismatch(f"shapes differ: {a.shape} {b.shape} {c.shape}")
    times = StreamTimes()
    if params.n_trials == 0:
        return times
    if params.threads == 1:
        _run_serial(a, b, c, params, times, on_trial)
    else:
        _run_threaded(a, b, c, params, times, on_trial)
    return times


def _run_serial(a, b, c, params, times, on_trial):
    q = params.q
    for _ in range(params.n_trials):
        t0 = perf_counter()
        _phase_copy(a, b, c, q)
        times.t_copy += perf_counter() - t0

        t0 = perf_counter()
        _phase_scale(a, b, c, q)
        times.t_scale += perf_counter() - t0

        t0 = perf_counter()
        _phase_add(a, b, c, q)
        times.t_add += perf_counter() - t0

        t0 = perf_counter()
        _phase_triad(a, b, c, q)
        times.t_triad += perf_counter() - t0
        if on_trial is not None:
            on_trial(times.copy())


def _run_threaded(a, b, c, params, times, on_trial):
    q = params.q
    nt = params.threads
    slices = thread_slices(a.shape, nt)
    start = threading.Barrier(nt + 1)
    done = threading.Barrier(nt + 1)
    phase: list = [None]

    def worker(ix):
        av, bv, cv = a[ix], b[ix], c[ix]
        while True:
            start.wait()
            fn = phase[0]
            if fn is None:
                return
            fn(av, bv, cv, q)
            done.wait()

    pool = [threading.Thread(target=worker, args=(ix,), daemon=True) for ix in slices]
    for th in pool:
        th.start()
    attrs = ("t_copy", "t_scale", "t_add", "t_triad")
    try:
        for _ in range(params.n_trials):
            for fn, attr in zip(_PHASES, attrs):
                phase[0] = fn
                t0 = perf_counter()
                start.wait()  # release workers into the phase
                done.wait()  # returns once every slice is finished
                setattr(times, attr, getattr(times, attr) + perf_counter() - t0)
            if on_trial is not None:
                on_trial(times.copy())
    finally:
        phase[0] = None
        start.wait()
        for th in pool:
            th.join()


def validate(a, b, c, params: StreamParams) -> ValidationReport:
    """Check final vector contents against the closed-form recurrence.

    With s = 2q + q^2 and initial value a0, after Nt trials every element
    must satisfy A = s^Nt * a0, B = q * s^(Nt-1) * a0, and
    C = (1+q) * s^(Nt-1) * a0.  Failure is a report, not an exception.
    """
    if params.n_trials < 1:
        raise StreamError("validation requires at least one trial")
    q = params.q
    s = 2.0 * q + q * q
    a_prev = s ** (params.n_trials - 1) * params.a0
    expected_a = s ** params.n_trials * params.a0
    expected_b = q * a_prev
    expected_c = (1.0 + q) * a_prev
    tol = validation_tolerance(params.n_trials)
    errs = [
        _max_rel_err(x, e) for x, e in ((a, expected_a), (b, expected_b), (c, expected_c))
    ]
    return ValidationReport(
        passed=all(e <= tol for e in errs),
        max_rel_err_a=errs[0],
        max_rel_err_b=errs[1],
        max_rel_err_c=errs[2],
        tolerance=tol,
    )


def _max_rel_err(x, expected: float) -> float:
    if x.size == 0:
        return 0.0
    worst = float(np.max(np.abs(np.asarray(x) - expected)))
    return worst / abs(expected) if expected != 0.0 else worst


def bandwidths(times: StreamTimes, n_elements: int, n_trials: int) -> Bandwidths:
    """Bytes-per-second figures for one scope (rank-local or global N)."""
    td = times.as_dict()
    for name, t in td.items():
        if t <= 0.0:
            raise ZeroTime(f"{name} time is {t}; cannot form a bandwidth")
    return Bandwidths(
        bw_copy=16.0 * n_trials * n_elements / times.t_copy,
        bw_scale=16.0 * n_trials * n_elements / times.t_scale,
        bw_add=24.0 * n_trials * n_elements / times.t_add,
        bw_triad=24.0 * n_trials * n_elements / times.t_triad,
    )


@dataclass
class OracleResult:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    #: scalar (a, b, c) value after each trial; index 0 is the initial state.
    trajectory: list[tuple[float, float, float]] = field(default_factory=list)


def serial_oracle(params: StreamParams, n: int) -> OracleResult:
    """Single-threaded reference run used as ground truth in tests.

    Evaluates the textbook expressions on fresh arrays each step, plus a
    pure-scalar twin per element (all elements evolve identically), and
    records the scalar trajectory trial by trial.  Restricted to small n.
    """
    if n > _ORACLE_MAX_N:
        raise StreamError(f"oracle limited to n <= {_ORACLE_MAX_N}, got {n}")
    q = params.q
    a = np.full(n, params.a0, dtype=np.float64)
    b = np.full(n, params.b0, dtype=np.float64)
    c = np.full(n, params.c0, dtype=np.float64)
    sa, sb, sc = params.a0, params.b0, params.c0
    traj = [(sa, sb, sc)]
    for _ in range(params.n_trials):
        c = a.copy()
        b = q * c
        c = a + b
        a = b + q * c
        sc = sa
        sb = q * sc
        sc = sa + sb
        sa = sb + q * sc
        traj.append((sa, sb, sc))
    return OracleResult(a=a, b=b, c=c, trajectory=traj)
