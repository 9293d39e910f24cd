"""Acceptance suite: end-to-end checks of the package's headline
guarantees, one test each.

Each test prints a single PASS line (with the measured numbers) after
its assertions; a failure shows up as the test's FAIL line instead.
Runtime budgets are wall-clock and asserted inside the tests.
"""

import json
import math
import os
import random
import subprocess
import sys
import tempfile
import threading
import time

import numpy as np
import pytest

from dstream import darray, dmap, report, runtime, stream
from dstream.cli import simulate_run
from dstream.dmap import DistSpec
from dstream.stream import DEFAULT_Q, StreamParams

EPS = np.finfo(np.float64).eps


def announce(name, detail=""):
    print(f"PASS  {name}" + (f"  [{detail}]" if detail else ""), flush=True)


def host_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def cli_env():
    env = dict(os.environ)
    src = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir, "src"))
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    return env


def run_cli(args, timeout):
    return subprocess.run([sys.executable, "-m", "dstream"] + args,
                          capture_output=True, text=True, env=cli_env(),
                          timeout=timeout)


def test_closed_form_validation():
    # defaults, nt=10, n=2^20, np in {1,2,4}; every element within
    # max(1e-10, 20*nt*eps) of the closed forms; under 10 s
    t0 = time.perf_counter()
    n, nt = 2 ** 20, 10
    q = DEFAULT_Q
    s = 2 * q + q * q
    tol = max(1e-10, 20 * nt * EPS)
    expect = {"a": s ** nt, "b": q * s ** (nt - 1), "c": (1 + q) * s ** (nt - 1)}
    worst = 0.0
    for np_ in (1, 2, 4):
        ga, gb, gc = simulate_run(n, np_, "block", n_trials=nt)
        for vec, key in ((ga, "a"), (gb, "b"), (gc, "c")):
            err = float(np.max(np.abs(vec - expect[key]) / abs(expect[key])))
            worst = max(worst, err)
            assert err <= tol, (np_, key, err, tol)
        params = StreamParams(n_global=n, n_trials=nt)
        verdict = stream.validate(ga, gb, gc, params)
        assert verdict.passed
        assert verdict.tolerance == tol
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    announce("closed-form validation n=2^20 np={1,2,4}",
             f"max rel err {worst:.3g} <= tol {tol:.3g}, {elapsed:.1f}s")


def test_oracle_equivalence():
    # n=2^16, nt in {1,10}, np in {1,2,3,4}, three distributions:
    # reassembled finals bitwise-identical to the serial reference; < 30 s
    t0 = time.perf_counter()
    n = 2 ** 16
    cases = 0
    for nt in (1, 10):
        params = StreamParams(n_global=n, n_trials=nt)
        oracle = stream.serial_oracle(params, n)
        for np_ in (1, 2, 3, 4):
            for dist, bs in (("block", 1), ("cyclic", 1), ("blockcyclic", 4)):
                ga, gb, gc = simulate_run(n, np_, dist, n_trials=nt,
                                          block_size=bs)
                assert np.array_equal(ga, oracle.a), (nt, np_, dist)
                assert np.array_equal(gb, oracle.b), (nt, np_, dist)
                assert np.array_equal(gc, oracle.c), (nt, np_, dist)
                cases += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    announce("oracle equivalence n=2^16",
             f"{cases} (nt, np, dist) cases bitwise-identical, {elapsed:.1f}s")


def test_partition_fuzzing():
    # 1000 random (n, p, dist, overlap) instances, n >= p: owned sets
    # cover exactly once, halo'd indices have at most two holders, and
    # index maps round-trip; under 5 s
    t0 = time.perf_counter()
    rng = random.Random(0xD57E)
    kinds = [DistSpec.block(), DistSpec.cyclic(), DistSpec.block_cyclic(1)]
    for trial in range(1000):
        p = rng.randint(1, 6)
        n = rng.randint(p, 96)
        choice = rng.randrange(3)
        spec = (DistSpec.block_cyclic(rng.randint(1, 5)) if choice == 2
                else kinds[choice])
        # the two-holder guarantee requires the halo within one block
        o = (rng.randint(0, math.ceil(n / p))
             if spec.kind is dmap.DistKind.BLOCK else 0)
        m = dmap.new_map([1, p], dists=[DistSpec.block(), spec],
                         pids=list(range(p)), overlap=[0, o])
        owned, held = {}, {g: 0 for g in range(n)}
        for pid in m.pids:
            ext = dmap.local_extent(m, (1, n), pid)
            for g in ext.owned[1].global_indices():
                g = int(g)
                assert g not in owned, f"trial {trial}: double-owned {g}"
                owned[g] = pid
            for g in ext.with_overlap[1].global_indices():
                held[int(g)] += 1
        assert sorted(owned) == list(range(n)), f"trial {trial}: cover gap"
        assert all(1 <= h <= 2 for h in held.values()), f"trial {trial}"
        for pid in m.pids:
            ext = dmap.local_extent(m, (1, n), pid)
            for l in range(ext.owned[1].size):
                gidx = dmap.local_to_global(m, (1, n), pid, (0, l))
                assert dmap.global_to_local(m, (1, n), pid, gidx) == (0, l)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"took {elapsed:.1f}s"
    announce("partition fuzzing", f"1000 instances, {elapsed:.2f}s")


def test_bandwidth_formula_exactness():
    # unit-formula evaluation and symmetric two-rank aggregation,
    # exact to 1 part in 1e9
    bw = stream.bandwidths(stream.StreamTimes(1.0, 1.0, 1.0, 1.0), 1, 1)
    assert (bw.bw_copy, bw.bw_scale, bw.bw_add, bw.bw_triad) == (16, 16, 24, 24)

    times = stream.StreamTimes(0.5, 0.5, 0.5, 0.5)
    ranks = [report.RankResult(
        run_id="r", pid=p, host="h", local_elements=1000, threads=1,
        times=times, bandwidths=stream.bandwidths(times, 1000, 2),
        validation=stream.ValidationReport(True, 0, 0, 0, 1e-10),
        checksum=0.0, t_start=0.0, t_end=1.0) for p in range(2)]
    agg = report.aggregate(ranks, n_trials=2, q=DEFAULT_Q)
    single = ranks[0].bandwidths
    for op in ("bw_copy", "bw_scale", "bw_add", "bw_triad"):
        got = getattr(agg.aggregate_mean, op)
        want = 2 * getattr(single, op)  # double bytes, equal mean time
        assert abs(got - want) <= 1e-9 * want, (op, got, want)
        cons = getattr(agg.aggregate_conservative, op)
        assert abs(cons - want) <= 1e-9 * want
    announce("bandwidth formula exactness",
             "unit formulas (16,16,24,24); symmetric 2-rank doubling")


def test_integration_run():
    # run --triples 1,4,1 --n-per-proc 2^24 --nt 10: completes, exit 0,
    # all ranks validate, reports parse and round-trip, conservative <=
    # mean; under 2 minutes (sized for a >=4-core host, but nothing
    # here depends on core count)
    t0 = time.perf_counter()
    out = tempfile.mkdtemp(prefix="dstream-accept-")
    r = run_cli(["run", "--triples", "1,4,1", "--n-per-proc", str(2 ** 24),
                 "--nt", "10", "--out", out, "--timeout", "110"],
                timeout=118)
    assert r.returncode == 0, r.stdout + r.stderr
    (run_id,) = os.listdir(out)
    with open(os.path.join(out, run_id, "report.json"), "rb") as f:
        blob = f.read()
    rep = report.deserialize(blob, "json")
    assert rep.validated
    assert len(rep.ranks) == 4
    assert all(rk.validation.passed for rk in rep.ranks)
    assert rep.n_global == 4 * 2 ** 24
    assert report.serialize(rep, "json") == blob  # round-trip
    for op in ("bw_copy", "bw_scale", "bw_add", "bw_triad"):
        assert getattr(rep.aggregate_conservative, op) <= getattr(
            rep.aggregate_mean, op)
    with open(os.path.join(out, run_id, "table.csv")) as f:
        rows = report.parse_table(f.read())
    assert rows[0].np == 4 and rows[0].validated
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    announce("integration run 1,4,1 x 2^24 x nt=10",
             f"validated, triad {rep.aggregate_mean.bw_triad / 2**30:.1f} GiB/s "
             f"(mean) {rep.aggregate_conservative.bw_triad / 2**30:.1f} (cons), "
             f"{elapsed:.0f}s")


def test_weak_scaling_sanity():
    # sweep np=[1,2]: bytes double exactly; the np=2 triad mean-time
    # figure stays within 0.8x of np=1 (threshold stated for a >=2-core
    # host; reported informationally when this host has fewer)
    out = tempfile.mkdtemp(prefix="dstream-accept-")
    r = run_cli(["sweep", "--np-list", "1,2", "--n-per-proc", str(2 ** 23),
                 "--nt", "20", "--out", out], timeout=300)
    assert r.returncode == 0, r.stdout + r.stderr
    (sweep_file,) = [e for e in os.listdir(out) if e.startswith("sweep-")]
    with open(os.path.join(out, sweep_file)) as f:
        rows = report.parse_table(f.read())
    assert [row.np for row in rows] == [1, 2]
    assert all(row.validated for row in rows)
    # constant n-per-proc: total elements (hence bytes) double exactly
    assert rows[1].n_global == 2 * rows[0].n_global
    assert rows[1].n_trials == rows[0].n_trials
    ratio = rows[1].bw_triad / rows[0].bw_triad
    cores = host_cores()
    if cores >= 2:
        assert ratio >= 0.8, f"triad ratio {ratio:.3f} on {cores} cores"
        detail = f"bytes double exactly; triad ratio {ratio:.2f} >= 0.8"
    else:
        # the threshold assumes each process gets its own core; on a
        # smaller host both ranks time-share and the ratio is noise
        detail = (f"bytes double exactly; triad ratio {ratio:.2f} "
                  f"informational ({cores}-core host, threshold needs >=2)")
    announce("weak scaling np=[1,2]", detail)


def test_messaging_protocol():
    # barrier and gather with an injected 1 s straggler, duplicate-pid
    # abort, and an interposed reader hunting for partial files; < 30 s
    t0 = time.perf_counter()
    comm = tempfile.mkdtemp(prefix="dstream-accept-")

    # barrier: nobody exits before the delayed member enters
    rid = runtime.new_run_id()
    pss = [runtime.init(pid=p, np=4, comm_dir=comm, run_id=rid, threads=1)
           for p in range(4)]
    enter, leave, errs = {}, {}, []

    def member(ps, delay):
        try:
            time.sleep(delay)
            enter[ps.pid] = time.monotonic()
            runtime.barrier(ps, "acc", timeout=25)
            leave[ps.pid] = time.monotonic()
            runtime.gather(ps, "acc2", bytes([ps.pid]), timeout=25)
        except Exception as e:
            errs.append(e)

    threads = [threading.Thread(target=member, args=(ps, 1.0 if ps.pid == 3 else 0.0))
               for ps in pss]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errs, errs
    assert min(leave.values()) >= max(enter.values())
    assert max(leave.values()) - min(enter.values()) >= 1.0

    # gather straggler: leader still assembles pid-ordered payloads
    rid2 = runtime.new_run_id()
    pss2 = [runtime.init(pid=p, np=3, comm_dir=comm, run_id=rid2, threads=1)
            for p in range(3)]
    got = {}

    def gmember(ps):
        if ps.pid == 2:
            time.sleep(1.0)
        got[ps.pid] = runtime.gather(ps, "slow", bytes([ps.pid]), timeout=25)

    threads = [threading.Thread(target=gmember, args=(ps,)) for ps in pss2]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got[0] == [b"\x00", b"\x01", b"\x02"]

    # duplicate pid: second claimant exits nonzero, so a launcher aborts
    rid3 = runtime.new_run_id()
    runtime.init(pid=0, np=2, comm_dir=comm, run_id=rid3, threads=1)
    r = run_cli(["worker", "--pid", "0", "--np", "2", "--comm-dir", comm,
                 "--run-id", rid3, "--n-per-proc", "64", "--nt", "1"],
                timeout=60)
    assert r.returncode != 0
    assert "DuplicateRank" in r.stdout + r.stderr

    # atomicity: a racing reader never sees a partial message file
    (ps,) = [runtime.init(pid=0, np=1, comm_dir=comm,
                          run_id=runtime.new_run_id(), threads=1)]
    path = os.path.join(ps.run_dir, "msg.atomic.0")
    stop = threading.Event()
    partial, complete = [], [0]

    def reader():
        while not stop.is_set():
            if os.path.exists(path):
                with open(path, "rb") as f:
                    blob = f.read()
                try:
                    runtime.unpack_envelope(blob)
                    complete[0] += 1
                except runtime.CorruptPayload:
                    partial.append(len(blob))

    rt = threading.Thread(target=reader)
    rt.start()
    try:
        for i in range(80):
            runtime.post_message(ps, "atomic", bytes([i]) * (1 + 4093 * (i % 11)))
    finally:
        stop.set()
        rt.join()
    assert not partial, f"partial reads seen: {partial[:5]}"
    assert complete[0] > 0

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    announce("messaging protocol",
             f"straggler barrier+gather, duplicate-pid abort, "
             f"{complete[0]} atomic reads with 0 partials, {elapsed:.1f}s")


def test_overlap_sync():
    # 4-pid block map, overlap=1, distinct fills: every halo equals the
    # right neighbor's first owned value exactly
    m = dmap.new_map([1, 4], dists=[DistSpec.block()] * 2,
                     pids=[0, 1, 2, 3], overlap=[0, 1])
    comm = tempfile.mkdtemp(prefix="dstream-accept-")
    rid = runtime.new_run_id()
    pss = [runtime.init(pid=p, np=4, comm_dir=comm, run_id=rid, threads=1)
           for p in range(4)]
    fills = [3.5, -1.25, 1e300, 7e-200]  # exactly representable doubles
    arrays = []
    for p in range(4):
        arr = darray.zeros((1, 16), m, p, tag="acc")
        darray.fill(arr, fills[p])
        arrays.append(arr)
    errs = []

    def sync(p):
        try:
            darray.sync_overlap(arrays[p], pss[p], timeout=25)
        except Exception as e:
            errs.append(e)

    threads = [threading.Thread(target=sync, args=(p,)) for p in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errs, errs
    for p in range(3):
        halo = arrays[p].local[0, -1]
        neighbor_first = darray.local_view(arrays[p + 1])[0, 0]
        assert halo == neighbor_first == fills[p + 1], (p, halo)
        assert np.all(darray.local_view(arrays[p]) == fills[p])
    announce("overlap sync 4-pid block o=1",
             "halos equal neighbor owned values bitwise")
