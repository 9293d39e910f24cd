"""Command-line entry points: run, sweep, validate, and the worker.

`run` launches one benchmark over N_node x N_ppn processes and writes
report files; `sweep` repeats it over a list of process counts at
constant elements-per-process; `validate` runs a small, fast correctness
suite in-process; `worker` is the internal per-rank entry point that
`run` spawns.  The run and worker paths share one code path, so a rank's
pid is the only behavioral difference between processes.

Every flag's default can be overridden by an environment variable named
DSTREAM_<FLAG> (dashes become underscores, upper-cased): for example
DSTREAM_N_PER_PROC=65536 or DSTREAM_FORMAT=csv.  Explicit flags beat the
environment.

Output layout per run: <out>/<run_id>/{report.<fmt>, ranks.<fmt>,
table.csv, logs/} with the messaging directory under comm/.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import socket
import sys
import time
import traceback

import numpy as np

from . import darray, dmap, report, runtime, stream
from .dmap import DistSpec
from .report import RankResult
from .runtime import Triples
from .stream import DEFAULT_Q, StreamParams

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3

# fault-injection hook for the validate subcommand: a nonzero value is
# added to q for kernel execution only, so expectations no longer match
PERTURB_ENV = "DSTREAM_PERTURB_Q"

_DISTS = ("block", "cyclic", "blockcyclic")


def _env(flag: str, default, cast=str):
    raw = os.environ.get("DSTREAM_" + flag.replace("-", "_").upper())
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"bad value for DSTREAM_{flag.upper()}: {raw!r}")


def _env_bool(flag: str, default: bool) -> bool:
    return _env(flag, default, cast=lambda s: s.lower() in ("1", "true", "yes", "on"))


def parse_triples(text: str) -> Triples:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"triples must be three comma-separated integers, got {text!r}")
    try:
        return Triples(*(int(p) for p in parts))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _dist_spec(name: str, block_size: int) -> DistSpec:
    if name == "block":
        return DistSpec.block()
    if name == "cyclic":
        return DistSpec.cyclic()
    if name == "blockcyclic":
        return DistSpec.block_cyclic(block_size)
    raise argparse.ArgumentTypeError(f"unknown distribution {name!r}")


def _add_benchmark_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-per-proc", type=int,
                   default=_env("n-per-proc", 2 ** 24, int),
                   help="vector elements per process (default 2^24)")
    p.add_argument("--nt", type=int, default=_env("nt", 10, int),
                   help="number of trials (default 10)")
    p.add_argument("--q", type=float, default=_env("q", DEFAULT_Q, float),
                   help="scale constant (default sqrt(2)-1)")
    p.add_argument("--dist", choices=_DISTS, default=_env("dist", "block"),
                   help="distribution of the column dimension")
    p.add_argument("--block-size", type=int, default=_env("block-size", 1, int),
                   help="block size for blockcyclic")
    p.add_argument("--overlap", type=int, default=_env("overlap", 0, int),
                   help="halo depth on the column dimension (block only)")
    p.add_argument("--out", default=_env("out", "runs"),
                   help="output directory root")
    p.add_argument("--format", choices=report.FORMATS,
                   default=_env("format", "json"), help="report file format")
    p.add_argument("--pin", dest="pin", action="store_true",
                   default=_env_bool("pin", True))
    p.add_argument("--no-pin", dest="pin", action="store_false",
                   help="disable best-effort core pinning")
    p.add_argument("--timeout", type=float, default=_env("timeout", 600.0, float),
                   help="seconds before a run is abandoned")
    p.add_argument("--triples", type=parse_triples, default=None,
                   help="launch shape n_node,n_ppn,n_tpn")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dstream",
        description="Distributed STREAM memory-bandwidth benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="launch one benchmark run")
    _add_benchmark_flags(run)
    run.add_argument("--hostfile", default=_env("hostfile", None),
                     help="one host per line; required when n_node > 1")

    sweep = sub.add_parser("sweep", help="weak-scaling sweep over process counts")
    _add_benchmark_flags(sweep)
    sweep.add_argument("--np-list", required=True,
                       help="ascending comma-separated process counts, e.g. 1,2,4")
    sweep.add_argument("--hostfile", default=_env("hostfile", None))

    val = sub.add_parser("validate", help="run the built-in correctness suite")
    val.add_argument("--seed", type=int, default=_env("seed", 20240817, int),
                     help="seed for the map-fuzzing checks")

    worker = sub.add_parser("worker", help="internal per-rank entry point")
    _add_benchmark_flags(worker)
    worker.add_argument("--pid", type=int, default=None)
    worker.add_argument("--np", type=int, default=None)
    worker.add_argument("--comm-dir", default=None)
    worker.add_argument("--run-id", default=None)
    worker.add_argument("--threads", type=int, default=None)
    return p


# ---------------------------------------------------------------------------
# Shared benchmark pieces


def build_map(np_: int, dist: str, block_size: int, overlap: int) -> dmap.Map:
    """The benchmark's map: a 1 x NP process grid over a (1, N) array."""
    spec = _dist_spec(dist, block_size)
    return dmap.new_map([1, np_], dists=[DistSpec.block(), spec],
                        pids=range(np_), overlap=[0, overlap])


def _check_config(args) -> None:
    if args.nt < 1:
        raise SystemExit("--nt must be >= 1 so the run can be validated")
    if args.n_per_proc < 1:
        raise SystemExit("--n-per-proc must be >= 1")
    if args.overlap and args.dist != "block":
        raise SystemExit("--overlap requires --dist block")
    if args.block_size < 1:
        raise SystemExit("--block-size must be >= 1")


def worker_body(ps: runtime.ProcSet, args) -> int:
    """The per-rank benchmark sequence; every rank runs exactly this."""
    t_start = time.time()
    if args.pin:
        rep = runtime.pin(ps)
        print(f"pid {ps.pid}: pinning {rep.detail}; requested {list(rep.requested)}",
              flush=True)

    n_global = args.n_per_proc * ps.np
    m = build_map(ps.np, args.dist, args.block_size, args.overlap)
    dims = (1, n_global)
    params = StreamParams(n_global=n_global, n_trials=args.nt, q=args.q,
                          threads=ps.threads_per_proc)

    arrays = [darray.zeros(dims, m, ps.pid, threads=ps.threads_per_proc)
              for _ in range(3)]
    for arr, value in zip(arrays, (params.a0, params.b0, params.c0)):
        darray.fill(arr, value)
    a, b, c = (darray.local_view(arr) for arr in arrays)

    runtime.barrier(ps, "start", timeout=args.timeout)
    times = stream.run_kernels(a, b, c, params)
    verdict = stream.validate(a, b, c, params)

    n_local = arrays[0].element_count_local
    bw = stream.bandwidths(times, n_local, args.nt)
    anti_elision = sum(darray.checksum(arr) for arr in arrays)
    rr = RankResult(
        run_id=ps.run_id, pid=ps.pid, host=socket.gethostname(),
        local_elements=n_local, threads=ps.threads_per_proc,
        times=times, bandwidths=bw, validation=verdict,
        checksum=anti_elision, t_start=t_start, t_end=time.time())

    payload = json.dumps(report._rank_doc(rr)).encode()
    gathered = runtime.gather(ps, "result", payload, timeout=args.timeout)

    if ps.pid == 0:
        ranks = [report._rank_from(json.loads(blob)) for blob in gathered]
        triples = args.triples or Triples(1, ps.np, ps.threads_per_proc)
        agg = report.aggregate(ranks, n_trials=args.nt, q=args.q,
                               triples=triples, map_spec=dmap.to_config(m))
        _write_reports(agg, args.out, ps.run_id, args.format)
        if not agg.validated:
            bad = [r.pid for r in ranks if not r.validation.passed]
            print(f"validation FAILED on pids {bad}", flush=True)
            return EXIT_VALIDATION
        return EXIT_OK

    if not verdict.passed:
        print(f"pid {ps.pid}: validation failed "
              f"(errs a={verdict.max_rel_err_a:g} b={verdict.max_rel_err_b:g} "
              f"c={verdict.max_rel_err_c:g}, tol={verdict.tolerance:g})", flush=True)
        return EXIT_VALIDATION
    return EXIT_OK


def _write_reports(agg: report.AggregateReport, out: str, run_id: str,
                   fmt: str) -> None:
    run_dir = os.path.join(out, run_id)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, f"report.{fmt}"), "wb") as f:
        f.write(report.serialize(agg, fmt))
    with open(os.path.join(run_dir, f"ranks.{fmt}"), "w") as f:
        f.write(_render_ranks(agg.ranks, fmt))
    with open(os.path.join(run_dir, "table.csv"), "w") as f:
        f.write(report.render_table(report.to_table(agg)))


_RANKS_CSV_HEADER = ("pid,host,local_elements,threads,"
                     "t_copy,t_scale,t_add,t_triad,"
                     "bw_copy,bw_scale,bw_add,bw_triad,"
                     "checksum,validated,t_start,t_end")


def _render_ranks(ranks, fmt: str) -> str:
    if fmt == "json":
        return json.dumps([report._rank_doc(r) for r in ranks], indent=2) + "\n"
    lines = [_RANKS_CSV_HEADER]
    for r in ranks:
        t, b = r.times, r.bandwidths
        floats = (t.t_copy, t.t_scale, t.t_add, t.t_triad,
                  b.bw_copy, b.bw_scale, b.bw_add, b.bw_triad)
        lines.append(",".join(
            [str(r.pid), r.host, str(r.local_elements), str(r.threads)]
            + [f"{v:.17g}" for v in floats]
            + [f"{r.checksum:.17g}",
               "true" if r.validation.passed else "false",
               f"{r.t_start:.17g}", f"{r.t_end:.17g}"]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run


def _worker_argv(args, triples: Triples) -> list:
    argv = ["worker",
            "--n-per-proc", str(args.n_per_proc),
            "--nt", str(args.nt),
            "--q", repr(args.q),
            "--dist", args.dist,
            "--block-size", str(args.block_size),
            "--overlap", str(args.overlap),
            "--out", args.out,
            "--format", args.format,
            "--timeout", repr(args.timeout),
            "--triples", f"{triples.n_node},{triples.n_ppn},{triples.n_tpn}"]
    argv.append("--pin" if args.pin else "--no-pin")
    return argv


def _launch_run(args):
    """Start one full run; returns (exit_code, report or None, run_dir)."""
    _check_config(args)
    triples = args.triples or Triples(1, 1, 1)
    run_id = runtime.new_run_id()
    run_dir = os.path.join(args.out, run_id)
    comm_dir = os.path.join(run_dir, "comm")
    os.makedirs(comm_dir, exist_ok=True)

    codes = runtime.launch(
        triples, runtime.main_module_argv(), _worker_argv(args, triples),
        hostfile=getattr(args, "hostfile", None),
        comm_dir=comm_dir, run_id=run_id,
        log_dir=os.path.join(run_dir, "logs"),
        timeout=args.timeout, check=False)

    failed = {pid: rc for pid, rc in codes.items() if rc != 0}
    rep = _read_report(run_dir, args.format)
    if failed:
        for pid in sorted(failed):
            print(f"worker {pid} exited {failed[pid]}; see "
                  f"{os.path.join(run_dir, 'logs', f'worker.{pid}.log')}")
        return (EXIT_VALIDATION if rep is not None and not rep.validated
                else EXIT_ERROR), rep, run_dir
    if rep is None:
        print(f"run finished but no report was written under {run_dir}")
        return EXIT_ERROR, None, run_dir
    return EXIT_OK, rep, run_dir


def _read_report(run_dir: str, fmt: str):
    path = os.path.join(run_dir, "report.json")
    if fmt != "json" or not os.path.exists(path):
        # fall back to the table, which both formats always produce
        path = os.path.join(run_dir, "table.csv")
        if not os.path.exists(path):
            return None
        with open(path, "rb") as f:
            rows = report.deserialize(f.read(), "csv")
        return rows[0] if rows else None
    with open(path, "rb") as f:
        return report.deserialize(f.read(), "json")


def _print_summary(rep, run_dir: str) -> None:
    gib = 2.0 ** 30
    if isinstance(rep, report.AggregateReport):
        bw, ok, np_ = rep.aggregate_mean, rep.validated, rep.triples.np
    else:  # TableRow from the csv fallback
        bw, ok, np_ = rep, rep.validated, rep.np
    print(f"np={np_} validated={'yes' if ok else 'NO'}  "
          f"copy={bw.bw_copy / gib:.2f} scale={bw.bw_scale / gib:.2f} "
          f"add={bw.bw_add / gib:.2f} triad={bw.bw_triad / gib:.2f} GiB/s")
    print(f"report files in {run_dir}")


def cmd_run(args) -> int:
    code, rep, run_dir = _launch_run(args)
    if rep is not None:
        _print_summary(rep, run_dir)
    return code


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    try:
        np_list = [int(s) for s in args.np_list.split(",") if s.strip()]
    except ValueError:
        print(f"--np-list must be integers, got {args.np_list!r}")
        return EXIT_USAGE
    if not np_list:
        print("--np-list is empty")
        return EXIT_USAGE
    if np_list != sorted(np_list) or len(set(np_list)) != len(np_list):
        print(f"--np-list must be strictly ascending, got {np_list}")
        return EXIT_USAGE
    _check_config(args)

    base = args.triples or Triples(1, 1, 1)
    reports, failures = [], []
    for np_ in np_list:
        sub = argparse.Namespace(**vars(args))
        sub.triples = Triples(base.n_node, np_, base.n_tpn)
        code, rep, run_dir = _launch_run(sub)
        if code == EXIT_OK and isinstance(rep, report.AggregateReport):
            reports.append(rep)
            _print_summary(rep, run_dir)
        else:
            failures.append((np_, code))
            print(f"np={np_} FAILED with exit code {code}")

    table = report.render_table(report.to_table(reports)) if reports else ""
    for np_, code in failures:
        table += f"# np={np_} failed with exit code {code}\n"
    out_path = os.path.join(args.out, f"sweep-{runtime.new_run_id()}.csv")
    os.makedirs(args.out, exist_ok=True)
    with open(out_path, "w") as f:
        f.write(table)
    sys.stdout.write(table)
    print(f"sweep table written to {out_path}")
    return EXIT_OK if not failures else EXIT_ERROR


# ---------------------------------------------------------------------------
# validate


def simulate_run(n_global: int, np_: int, dist: str, n_trials: int,
                 q: float = DEFAULT_Q, block_size: int = 1, overlap: int = 0,
                 threads: int = 1, kernel_q: float = None):
    """Run every rank's kernel schedule in this process and reassemble.

    Returns the global (a, b, c) vectors.  kernel_q, when given, is the
    q actually used to execute kernels, while validation expectations
    elsewhere keep the nominal q; used for fault injection.
    """
    m = build_map(np_, dist, block_size, overlap)
    dims = (1, n_global)
    ga = np.empty(n_global)
    gb = np.empty(n_global)
    gc = np.empty(n_global)
    params = StreamParams(n_global=n_global, n_trials=n_trials,
                          q=q if kernel_q is None else kernel_q,
                          threads=threads)
    for pid in m.pids:
        arrays = [darray.zeros(dims, m, pid, threads=threads) for _ in range(3)]
        for arr, value in zip(arrays, (params.a0, params.b0, params.c0)):
            darray.fill(arr, value)
        a, b, c = (darray.local_view(arr) for arr in arrays)
        stream.run_kernels(a, b, c, params)
        cols = arrays[0].extent.owned[1].global_indices()
        ga[cols] = a[0]
        gb[cols] = b[0]
        gc[cols] = c[0]
    return ga, gb, gc


def _fuzz_partition(rng: random.Random, trials: int = 60):
    """Random small maps: per dimension, the slots must partition the range."""
    for _ in range(trials):
        p0 = rng.randint(1, 3)
        p1 = rng.randint(1, 4)
        dims = [rng.randint(p0, 12), rng.randint(p1, 24)]
        specs = []
        for _d in range(2):
            kind = rng.choice(_DISTS)
            specs.append(_dist_spec(kind, rng.randint(1, 4)))
        overlap = [rng.randint(0, 2) if s.kind == dmap.DistKind.BLOCK else 0
                   for s in specs]
        m = dmap.new_map([p0, p1], dists=specs, pids=range(p0 * p1),
                         overlap=overlap)
        seen = {}
        for pid in m.pids:
            ext = dmap.local_extent(m, dims, pid)
            rows = ext.owned[0].global_indices()
            cols = ext.owned[1].global_indices()
            for r in rows:
                for c in cols:
                    key = (int(r), int(c))
                    if key in seen:
                        return False, f"({r},{c}) owned by {seen[key]} and {pid}"
                    seen[key] = pid
                    got = dmap.owner(m, dims, key)
                    if got != pid:
                        return False, f"owner({key})={got}, extent says {pid}"
        if len(seen) != dims[0] * dims[1]:
            return False, f"covered {len(seen)} of {dims[0] * dims[1]} cells"
    return True, f"{trials} random maps partition exactly"


def cmd_validate(args) -> int:
    """Small-N correctness suite; prints one PASS/FAIL line per check."""
    n = 2 ** 16
    perturb = float(os.environ.get(PERTURB_ENV, "0") or "0")
    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        if not ok:
            failures += 1

    oracle = stream.serial_oracle(StreamParams(n_global=n, n_trials=3), n)
    for np_ in (1, 2, 3, 4):
        for dist in _DISTS:
            ga, gb, gc = simulate_run(n, np_, dist, n_trials=3,
                                      block_size=4 if dist == "blockcyclic" else 1)
            same = (np.array_equal(ga, oracle.a) and np.array_equal(gb, oracle.b)
                    and np.array_equal(gc, oracle.c))
            check(f"oracle equivalence np={np_} dist={dist}", same,
                  "finals bitwise-equal to serial reference" if same
                  else "finals differ from serial reference")

    for nt in (1, 10, 100):
        params = StreamParams(n_global=1024, n_trials=nt,
                              q=DEFAULT_Q + perturb, threads=1)
        a = np.full(1024, params.a0)
        b = np.full(1024, params.b0)
        c = np.full(1024, params.c0)
        stream.run_kernels(a, b, c, params)
        nominal = StreamParams(n_global=1024, n_trials=nt, q=DEFAULT_Q, threads=1)
        verdict = stream.validate(a, b, c, nominal)
        check(f"closed-form validation nt={nt}", verdict.passed,
              f"max rel err {max(verdict.max_rel_err_a, verdict.max_rel_err_b, verdict.max_rel_err_c):.3g} "
              f"vs tol {verdict.tolerance:.3g}")

    ok, detail = _fuzz_partition(random.Random(args.seed))
    check("map partition fuzzing", ok, detail)

    print(f"{'all checks passed' if failures == 0 else f'{failures} check(s) failed'}")
    return EXIT_OK if failures == 0 else EXIT_ERROR


# ---------------------------------------------------------------------------
# worker


def cmd_worker(args) -> int:
    try:
        ps = runtime.init(pid=args.pid, np=args.np, comm_dir=args.comm_dir,
                          run_id=args.run_id, threads=args.threads)
    except (runtime.MissingParameter, runtime.RankOutOfRange,
            runtime.BadCommDir, runtime.DuplicateRank) as e:
        print(f"worker startup failed: {type(e).__name__}: {e}", flush=True)
        return EXIT_USAGE
    try:
        _check_config(args)
        return worker_body(ps, args)
    except SystemExit as e:
        print(f"pid {ps.pid}: bad configuration: {e}", flush=True)
        return EXIT_USAGE
    except Exception:
        print(f"pid {ps.pid}: worker failed:\n{traceback.format_exc()}", flush=True)
        return EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "sweep": cmd_sweep,
                "validate": cmd_validate, "worker": cmd_worker}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
