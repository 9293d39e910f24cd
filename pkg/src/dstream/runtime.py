"""Process identity, launching, and file-based messaging.

Every inter-process exchange is a file under ``<comm_dir>/<run_id>/``,
written to a temporary name and renamed into place, so a message file is
never observable half-written.  Readers poll, starting at 50 ms and
backing off by 1.5x up to 500 ms.  Payloads travel in an envelope of two
little-endian 64-bit words (payload length, CRC-64 of the payload)
followed by the payload bytes.

File names inside the run directory:

    ready.<pid>              presence marker written by init()
    <label>.arrive.<pid>     barrier arrival
    <label>.release.0        barrier release, written by pid 0
    msg.<phase>.<pid>        enveloped message payload

Distinct run_ids get distinct directories, so concurrent runs sharing a
comm_dir never exchange messages.
"""

from __future__ import annotations

import os
import secrets
import shlex
import struct
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

POLL_INITIAL = 0.05
POLL_BACKOFF = 1.5
POLL_MAX = 0.5
BARRIER_TIMEOUT = 300.0

_ENV_PREFIX = "DSTREAM_"
_HEADER = struct.Struct("<QQ")


class MissingParameter(Exception):
    pass


class RankOutOfRange(Exception):
    pass


class BadCommDir(Exception):
    pass


class DuplicateRank(Exception):
    """A second process registered an already-claimed pid for this run."""


class Timeout(Exception):
    pass


class CorruptPayload(Exception):
    pass


class SpawnFailure(Exception):
    def __init__(self, pid: int, reason: str):
        super().__init__(f"failed to spawn worker pid {pid}: {reason}")
        self.pid = pid


class WorkerNonZeroExit(Exception):
    def __init__(self, pid: int, code: int, codes=None):
        super().__init__(f"worker pid {pid} exited with code {code}")
        self.pid = pid
        self.code = code
        self.codes = dict(codes or {})


class MissingHostfile(Exception):
    pass


# ---------------------------------------------------------------------------
# CRC-64 (the xz variant: reflected polynomial 0x42F0E1EBA9EA3693,
# initial and final XOR of all-ones).  crc64(b"123456789") must equal
# 0x995DC9BBDF1939FA.

_CRC64_POLY = 0xC96C5795D7870F42
_MASK = 0xFFFFFFFFFFFFFFFF


def _crc64_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = _MASK
    for byte in data:
        crc = _TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _MASK


def pack_envelope(payload: bytes) -> bytes:
    return _HEADER.pack(len(payload), crc64(payload)) + payload


def unpack_envelope(blob: bytes) -> bytes:
    if len(blob) < _HEADER.size:
        raise CorruptPayload(f"envelope truncated: {len(blob)} bytes")
    length, crc = _HEADER.unpack_from(blob)
    payload = blob[_HEADER.size :]
    if len(payload) != length:
        raise CorruptPayload(f"length field says {length}, payload has {len(payload)}")
    actual = crc64(payload)
    if actual != crc:
        raise CorruptPayload(f"checksum {actual:#018x} != declared {crc:#018x}")
    return payload


# ---------------------------------------------------------------------------
# Identity


@dataclass(frozen=True)
class ProcSet:
    """This process's place in a run: rank, world size, and comm paths."""

    np: int
    pid: int
    threads_per_proc: int
    comm_dir: str
    run_id: str

    @property
    def run_dir(self) -> str:
        return os.path.join(self.comm_dir, self.run_id)


@dataclass(frozen=True)
class Triples:
    """Launch shape [n_node, n_ppn, n_tpn]; total processes n_node * n_ppn."""

    n_node: int
    n_ppn: int
    n_tpn: int

    def __post_init__(self):
        for name in ("n_node", "n_ppn", "n_tpn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def np(self) -> int:
        return self.n_node * self.n_ppn


def new_run_id() -> str:
    return time.strftime("%Y%m%d-%H%M%S") + "-" + secrets.token_hex(4)


def _env_int(env, key, default):
    raw = env.get(_ENV_PREFIX + key)
    return default if raw is None else int(raw)


def init(pid=None, np=None, comm_dir=None, run_id=None, threads=None,
         env=None) -> ProcSet:
    """Resolve identity from explicit values, then environment, then defaults.

    With nothing provided this is a serial run: np=1, pid=0, a fresh
    temporary comm_dir.  Creates the run directory and atomically claims
    ``ready.<pid>`` inside it.
    """
    env = os.environ if env is None else env
    if np is None:
        np = _env_int(env, "NP", 1)
    if pid is None:
        pid = _env_int(env, "PID", 0 if np == 1 else None)
    if threads is None:
        threads = _env_int(env, "THREADS", 1)
    if comm_dir is None:
        comm_dir = env.get(_ENV_PREFIX + "COMM_DIR")
    if run_id is None:
        run_id = env.get(_ENV_PREFIX + "RUN_ID")

    if np < 1:
        raise MissingParameter(f"np must be >= 1, got {np}")
    if pid is None:
        raise MissingParameter("pid is required when np > 1")
    if not 0 <= pid < np:
        raise RankOutOfRange(f"pid {pid} outside [0, {np})")
    if threads < 1:
        raise MissingParameter(f"threads must be >= 1, got {threads}")
    if comm_dir is None:
        if np > 1:
            raise MissingParameter("comm_dir is required when np > 1")
        comm_dir = tempfile.mkdtemp(prefix="dstream-")
    if run_id is None:
        if np > 1:
            raise MissingParameter("run_id is required when np > 1")
        run_id = new_run_id()

    ps = ProcSet(np=np, pid=pid, threads_per_proc=threads,
                 comm_dir=comm_dir, run_id=run_id)
    try:
        os.makedirs(ps.run_dir, exist_ok=True)
    except OSError as e:
        raise BadCommDir(f"cannot create {ps.run_dir}: {e}") from None
    if not os.access(ps.comm_dir, os.W_OK):
        raise BadCommDir(f"{ps.comm_dir} is not writable")

    ready = os.path.join(ps.run_dir, f"ready.{pid}")
    try:
        fd = os.open(ready, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DuplicateRank(f"pid {pid} already registered in {ps.run_dir}") from None
    os.close(fd)
    return ps


# ---------------------------------------------------------------------------
# Messaging primitives


def _atomic_write(path: str, data: bytes) -> None:
    # temp file in the same directory so rename cannot cross filesystems
    d = os.path.dirname(path)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp.")
    try:
        os.write(fd, data)
        os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)


def _wait_for(paths, timeout: float, what: str) -> None:
    """Poll until every path exists, with exponential backoff."""
    deadline = time.monotonic() + timeout
    interval = POLL_INITIAL
    missing = list(paths)
    while True:
        missing = [p for p in missing if not os.path.exists(p)]
        if not missing:
            return
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            names = ", ".join(os.path.basename(p) for p in missing[:8])
            raise Timeout(f"{what}: still missing after {timeout:g}s: {names}")
        time.sleep(min(interval, remaining))
        interval = min(interval * POLL_BACKOFF, POLL_MAX)


def barrier(ps: ProcSet, label: str, timeout: float = BARRIER_TIMEOUT) -> None:
    """Block until all np processes have called barrier with this label.

    No process returns before every process has arrived.  pid 0 collects
    the arrivals and writes the single release file the rest poll for.
    """
    run = ps.run_dir
    _atomic_write(os.path.join(run, f"{label}.arrive.{ps.pid}"), b"")
    if ps.pid == 0:
        arrivals = [os.path.join(run, f"{label}.arrive.{p}") for p in range(ps.np)]
        _wait_for(arrivals, timeout, f"barrier '{label}' (pid 0 awaiting arrivals)")
        _atomic_write(os.path.join(run, f"{label}.release.0"), b"")
    else:
        _wait_for([os.path.join(run, f"{label}.release.0")], timeout,
                  f"barrier '{label}' (pid {ps.pid} awaiting release)")


def post_message(ps: ProcSet, phase: str, payload: bytes, pid=None) -> None:
    """Publish an enveloped payload as msg.<phase>.<pid> for this run."""
    pid = ps.pid if pid is None else pid
    path = os.path.join(ps.run_dir, f"msg.{phase}.{pid}")
    _atomic_write(path, pack_envelope(payload))


def fetch_message(ps: ProcSet, phase: str, src: int,
                  timeout: float = BARRIER_TIMEOUT) -> bytes:
    """Read pid src's message for a phase, verifying the envelope.

    Non-destructive: the file stays in place, so several readers may
    fetch the same message.
    """
    path = os.path.join(ps.run_dir, f"msg.{phase}.{src}")
    _wait_for([path], timeout, f"message '{phase}' from pid {src}")
    with open(path, "rb") as f:
        return unpack_envelope(f.read())


def gather(ps: ProcSet, phase: str, payload: bytes,
           timeout: float = BARRIER_TIMEOUT):
    """Collect one payload per pid at pid 0, in pid order.

    Every pid posts its payload under the phase name; pid 0 returns the
    ordered list, everyone else returns None.  Each pid must gather at
    most once per phase name.
    """
    post_message(ps, phase, payload)
    if ps.pid != 0:
        return None
    deadline = time.monotonic() + timeout
    out = []
    for src in range(ps.np):
        remaining = max(deadline - time.monotonic(), 0.001)
        out.append(fetch_message(ps, phase, src, timeout=remaining))
    return out


# ---------------------------------------------------------------------------
# Pinning


@dataclass(frozen=True)
class PinReport:
    requested: tuple
    achieved: tuple
    available: bool
    detail: str


def pin_cores(pid: int, n_tpn: int) -> range:
    """Adjacent-core assignment: pid's threads get [pid*n_tpn, (pid+1)*n_tpn)."""
    return range(pid * n_tpn, (pid + 1) * n_tpn)


def pin(ps: ProcSet) -> PinReport:
    """Best-effort: bind this process to its adjacent-core set.

    Never raises; platforms without affinity control, or hosts with too
    few cores, get a report saying what actually happened.
    """
    requested = tuple(pin_cores(ps.pid, ps.threads_per_proc))
    if not hasattr(os, "sched_setaffinity"):
        return PinReport(requested, (), False, "pinning unavailable")
    try:
        have = os.sched_getaffinity(0)
    except OSError as e:
        return PinReport(requested, (), False, f"pinning unavailable: {e}")
    usable = [c for c in requested if c in have]
    if not usable:
        return PinReport(requested, tuple(sorted(have)), False,
                         "requested cores not in affinity mask; left unpinned")
    try:
        os.sched_setaffinity(0, usable)
    except OSError as e:
        return PinReport(requested, tuple(sorted(have)), False,
                         f"pinning unavailable: {e}")
    achieved = tuple(sorted(os.sched_getaffinity(0)))
    note = "pinned" if list(achieved) == list(requested) else "partially pinned"
    return PinReport(requested, achieved, True, note)


# ---------------------------------------------------------------------------
# Launching


def launch(triples, program, program_args=(), hostfile=None, comm_dir=None,
           run_id=None, log_dir=None, timeout=None, check=True,
           remote_exec="ssh {host} {command}", extra_env=None):
    """Spawn n_node*n_ppn workers and wait for them all to exit.

    Each worker gets the contract flags ``--pid K --np N --comm-dir D
    --run-id R --threads T`` appended after program_args, plus matching
    DSTREAM_* environment variables.  Worker stdout/stderr goes to
    per-pid files under log_dir (default: <run_dir>/logs).

    Returns {pid: exit_code}.  With check=True any nonzero code raises
    WorkerNonZeroExit instead.  Multi-node (n_node > 1) needs a hostfile
    naming one host per line; each remote worker is wrapped in the
    remote_exec template.  Local mode is the tested path.
    """
    if isinstance(triples, int):
        triples = Triples(1, triples, 1)
    total = triples.np
    if triples.n_node > 1 and hostfile is None:
        raise MissingHostfile(f"{triples.n_node} nodes requested without a hostfile")
    hosts = [None] * total
    if triples.n_node > 1:
        with open(hostfile) as f:
            names = [ln.strip() for ln in f if ln.strip()]
        if len(names) < triples.n_node:
            raise MissingHostfile(
                f"hostfile lists {len(names)} hosts, need {triples.n_node}")
        hosts = [names[p // triples.n_ppn] for p in range(total)]

    comm_dir = comm_dir or tempfile.mkdtemp(prefix="dstream-")
    run_id = run_id or new_run_id()
    run_dir = os.path.join(comm_dir, run_id)
    os.makedirs(run_dir, exist_ok=True)
    log_dir = log_dir or os.path.join(run_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)

    base = list(program) if isinstance(program, (list, tuple)) else [program]
    env = dict(os.environ)
    env.update(extra_env or {})

    procs, logs = [], []
    try:
        for pid in range(total):
            cmd = base + list(program_args) + [
                "--pid", str(pid), "--np", str(total),
                "--comm-dir", comm_dir, "--run-id", run_id,
                "--threads", str(triples.n_tpn),
            ]
            if hosts[pid] is not None:
                cmd = shlex.split(
                    remote_exec.format(host=hosts[pid], command=shlex.join(cmd)))
            wenv = dict(env)
            wenv.update({
                _ENV_PREFIX + "PID": str(pid),
                _ENV_PREFIX + "NP": str(total),
                _ENV_PREFIX + "COMM_DIR": comm_dir,
                _ENV_PREFIX + "RUN_ID": run_id,
                _ENV_PREFIX + "THREADS": str(triples.n_tpn),
            })
            log = open(os.path.join(log_dir, f"worker.{pid}.log"), "wb")
            logs.append(log)
            try:
                procs.append(subprocess.Popen(
                    cmd, stdout=log, stderr=subprocess.STDOUT, env=wenv))
            except OSError as e:
                raise SpawnFailure(pid, str(e)) from None

        deadline = None if timeout is None else time.monotonic() + timeout
        codes = {}
        pending = dict(enumerate(procs))
        while pending:
            for pid, proc in list(pending.items()):
                rc = proc.poll()
                if rc is not None:
                    codes[pid] = rc
                    del pending[pid]
            if not pending:
                break
            if deadline is not None and time.monotonic() > deadline:
                alive = sorted(pending)
                for proc in pending.values():
                    proc.kill()
                raise Timeout(f"workers still running after {timeout:g}s: {alive}")
            time.sleep(0.02)
    except BaseException:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
        raise
    finally:
        for log in logs:
            log.close()

    if check:
        for pid in sorted(codes):
            if codes[pid] != 0:
                raise WorkerNonZeroExit(pid, codes[pid], codes)
    return codes


def worker_contract_flags(ps: ProcSet) -> list:
    """The launch()-appended flags, reconstructed from a ProcSet."""
    return ["--pid", str(ps.pid), "--np", str(ps.np),
            "--comm-dir", ps.comm_dir, "--run-id", ps.run_id,
            "--threads", str(ps.threads_per_proc)]


def main_module_argv() -> list:
    """argv prefix that re-invokes this interpreter's dstream CLI."""
    return [sys.executable, "-m", "dstream"]
