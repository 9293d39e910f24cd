"""Aggregation of per-rank benchmark results into run-level reports.

Two aggregate bandwidths are computed per kernel.  The mean-time figure
divides total bytes moved by the mean of the per-rank times; it is the
headline number.  The conservative figure divides by the slowest rank's
time, which is the throughput actually observed end to end; it can never
exceed the mean-time figure.

Everything here is a pure function of its inputs: no clocks, no files.
Serialization offers a structured JSON document that round-trips an
AggregateReport exactly (rank records included) and a CSV scaling table
whose header is a fixed contract; CSV floats carry 17 significant digits
so parsed rows reproduce the written rows bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .runtime import Triples
from .stream import BYTES_PER_ELEMENT, Bandwidths, StreamTimes, ValidationReport

TABLE_HEADER = ("np,nodes,ppn,tpn,n_global,n_trials,"
                "bw_copy,bw_scale,bw_add,bw_triad,"
                "bw_copy_cons,bw_scale_cons,bw_add_cons,bw_triad_cons,validated")

_KERNELS = ("copy", "scale", "add", "triad")


class EmptyInput(Exception):
    pass


class MixedRunIds(Exception):
    pass


class InconsistentSweep(Exception):
    pass


class ParseError(Exception):
    def __init__(self, message: str, line: int = 0, field: str = ""):
        where = f" (line {line}" + (f", field {field!r})" if field else ")")
        super().__init__(message + where)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class RankResult:
    """One process's benchmark outcome, as shipped through gather()."""

    run_id: str
    pid: int
    host: str
    local_elements: int
    threads: int
    times: StreamTimes
    bandwidths: Bandwidths
    validation: ValidationReport
    checksum: float
    t_start: float
    t_end: float


@dataclass(frozen=True)
class AggregateReport:
    run_id: str
    triples: Triples
    map_spec: dict | None
    n_global: int
    n_trials: int
    q: float
    aggregate_mean: Bandwidths
    aggregate_conservative: Bandwidths
    rank_min: Bandwidths
    rank_mean: Bandwidths
    rank_max: Bandwidths
    validated: bool
    ranks: tuple


def aggregate(rank_results, n_trials: int, q: float, triples: Triples = None,
              map_spec: dict = None) -> AggregateReport:
    """Combine per-rank results into one report.

    All results must share a run_id.  Total bytes per kernel are formed
    in exact integer arithmetic before the single float division, so a
    one-rank aggregate equals that rank's own bandwidths bitwise.
    """
    ranks = sorted(rank_results, key=lambda r: r.pid)
    if not ranks:
        raise EmptyInput("no rank results to aggregate")
    run_ids = sorted({r.run_id for r in ranks})
    if len(run_ids) > 1:
        raise MixedRunIds(f"results span runs {run_ids}")
    if triples is None:
        triples = Triples(1, len(ranks), ranks[0].threads)

    n_global = sum(r.local_elements for r in ranks)

    def combine(op):
        total = sum(BYTES_PER_ELEMENT[op] * n_trials * r.local_elements
                    for r in ranks)
        ts = [getattr(r.times, f"t_{op}") for r in ranks]
        mean_t = sum(ts) / len(ts)
        return float(total) / mean_t, float(total) / max(ts)

    pairs = {op: combine(op) for op in _KERNELS}
    mean_bw = Bandwidths(*(pairs[op][0] for op in _KERNELS))
    cons_bw = Bandwidths(*(pairs[op][1] for op in _KERNELS))

    def across(fn):
        return Bandwidths(*(
            fn(getattr(r.bandwidths, f"bw_{op}") for r in ranks)
            for op in _KERNELS))

    return AggregateReport(
        run_id=ranks[0].run_id,
        triples=triples,
        map_spec=map_spec,
        n_global=n_global,
        n_trials=n_trials,
        q=q,
        aggregate_mean=mean_bw,
        aggregate_conservative=cons_bw,
        rank_min=across(min),
        rank_mean=across(lambda xs: (lambda v: sum(v) / len(v))(list(xs))),
        rank_max=across(max),
        validated=all(r.validation.passed for r in ranks),
        ranks=tuple(ranks),
    )


# ---------------------------------------------------------------------------
# Scaling table


@dataclass(frozen=True)
class TableRow:
    np: int
    nodes: int
    ppn: int
    tpn: int
    n_global: int
    n_trials: int
    bw_copy: float
    bw_scale: float
    bw_add: float
    bw_triad: float
    bw_copy_cons: float
    bw_scale_cons: float
    bw_add_cons: float
    bw_triad_cons: float
    validated: bool


def _row(report: AggregateReport) -> TableRow:
    t, m, c = report.triples, report.aggregate_mean, report.aggregate_conservative
    return TableRow(t.np, t.n_node, t.n_ppn, t.n_tpn,
                    report.n_global, report.n_trials,
                    m.bw_copy, m.bw_scale, m.bw_add, m.bw_triad,
                    c.bw_copy, c.bw_scale, c.bw_add, c.bw_triad,
                    report.validated)


def to_table(reports) -> list:
    """Scaling-table rows, one per report, ordered by process count.

    A multi-report sweep must hold elements-per-process and trial count
    constant (the weak-scaling policy) and use distinct process counts.
    """
    if isinstance(reports, AggregateReport):
        reports = [reports]
    reports = sorted(reports, key=lambda r: r.triples.np)
    if not reports:
        return []
    per_proc = {(r.n_global // r.triples.np, r.n_global % r.triples.np,
                 r.n_trials) for r in reports}
    if len(per_proc) > 1:
        raise InconsistentSweep(
            "sweep mixes per-process sizes or trial counts: "
            + ", ".join(f"np={r.triples.np} n={r.n_global} nt={r.n_trials}"
                        for r in reports))
    nps = [r.triples.np for r in reports]
    if len(set(nps)) != len(nps):
        raise InconsistentSweep(f"duplicate process counts in sweep: {nps}")
    return [_row(r) for r in reports]


def render_table(rows) -> str:
    lines = [TABLE_HEADER]
    for r in rows:
        lines.append(",".join(
            [str(r.np), str(r.nodes), str(r.ppn), str(r.tpn),
             str(r.n_global), str(r.n_trials)]
            + [f"{getattr(r, f):.17g}" for f in (
                "bw_copy", "bw_scale", "bw_add", "bw_triad",
                "bw_copy_cons", "bw_scale_cons", "bw_add_cons",
                "bw_triad_cons")]
            + ["true" if r.validated else "false"]))
    return "\n".join(lines) + "\n"


_INT_FIELDS = ("np", "nodes", "ppn", "tpn", "n_global", "n_trials")
_FLOAT_FIELDS = ("bw_copy", "bw_scale", "bw_add", "bw_triad",
                 "bw_copy_cons", "bw_scale_cons", "bw_add_cons",
                 "bw_triad_cons")


def parse_table(text: str) -> list:
    """Inverse of render_table; errors carry line number and field name."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty table", line=1)
    if lines[0].strip() != TABLE_HEADER:
        raise ParseError(f"bad header: {lines[0]!r}", line=1)
    names = TABLE_HEADER.split(",")
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(names):
            raise ParseError(f"expected {len(names)} fields, got {len(parts)}",
                             line=lineno)
        vals = {}
        for name, raw in zip(names, parts):
            try:
                if name in _INT_FIELDS:
                    vals[name] = int(raw)
                elif name in _FLOAT_FIELDS:
                    vals[name] = float(raw)
                elif raw in ("true", "false"):
                    vals[name] = raw == "true"
                else:
                    raise ValueError(f"not a boolean: {raw!r}")
            except ValueError as e:
                raise ParseError(str(e), line=lineno, field=name) from None
        rows.append(TableRow(**vals))
    return rows


# ---------------------------------------------------------------------------
# Structured serialization

FORMATS = ("json", "csv")


def _bw_doc(b: Bandwidths) -> dict:
    return {"bw_copy": b.bw_copy, "bw_scale": b.bw_scale,
            "bw_add": b.bw_add, "bw_triad": b.bw_triad}


def _rank_doc(r: RankResult) -> dict:
    return {
        "run_id": r.run_id, "pid": r.pid, "host": r.host,
        "local_elements": r.local_elements, "threads": r.threads,
        "times": {"t_copy": r.times.t_copy, "t_scale": r.times.t_scale,
                  "t_add": r.times.t_add, "t_triad": r.times.t_triad},
        "bandwidths": _bw_doc(r.bandwidths),
        "validation": {
            "passed": r.validation.passed,
            "max_rel_err_a": r.validation.max_rel_err_a,
            "max_rel_err_b": r.validation.max_rel_err_b,
            "max_rel_err_c": r.validation.max_rel_err_c,
            "tolerance": r.validation.tolerance,
        },
        "checksum": r.checksum, "t_start": r.t_start, "t_end": r.t_end,
    }


def _bw_from(doc) -> Bandwidths:
    return Bandwidths(doc["bw_copy"], doc["bw_scale"], doc["bw_add"],
                      doc["bw_triad"])


def _rank_from(doc) -> RankResult:
    v = doc["validation"]
    return RankResult(
        run_id=doc["run_id"], pid=doc["pid"], host=doc["host"],
        local_elements=doc["local_elements"], threads=doc["threads"],
        times=StreamTimes(**doc["times"]),
        bandwidths=_bw_from(doc["bandwidths"]),
        validation=ValidationReport(v["passed"], v["max_rel_err_a"],
                                    v["max_rel_err_b"], v["max_rel_err_c"],
                                    v["tolerance"]),
        checksum=doc["checksum"], t_start=doc["t_start"], t_end=doc["t_end"],
    )


def serialize(report: AggregateReport, format: str = "json") -> bytes:
    """One document per run: metadata, per-rank records, aggregates.

    The JSON form round-trips through deserialize with every field
    intact.  The CSV form is the one-row scaling table (aggregate-level
    fields only; rank records are not representable in it).
    """
    if format == "csv":
        return render_table(to_table(report)).encode()
    if format != "json":
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    t = report.triples
    doc = {
        "run_id": report.run_id,
        "triples": [t.n_node, t.n_ppn, t.n_tpn],
        "map": report.map_spec,
        "n_global": report.n_global,
        "n_trials": report.n_trials,
        "q": report.q,
        "aggregate_mean": _bw_doc(report.aggregate_mean),
        "aggregate_conservative": _bw_doc(report.aggregate_conservative),
        "rank_min": _bw_doc(report.rank_min),
        "rank_mean": _bw_doc(report.rank_mean),
        "rank_max": _bw_doc(report.rank_max),
        "validated": report.validated,
        "ranks": [_rank_doc(r) for r in report.ranks],
    }
    return (json.dumps(doc, indent=2) + "\n").encode()


def deserialize(blob: bytes, format: str = "json"):
    """Inverse of serialize: JSON -> AggregateReport, CSV -> TableRow list."""
    text = blob.decode() if isinstance(blob, bytes) else blob
    if format == "csv":
        return parse_table(text)
    if format != "json":
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    try:
        return AggregateReport(
            run_id=doc["run_id"],
            triples=Triples(*doc["triples"]),
            map_spec=doc["map"],
            n_global=doc["n_global"],
            n_trials=doc["n_trials"],
            q=doc["q"],
            aggregate_mean=_bw_from(doc["aggregate_mean"]),
            aggregate_conservative=_bw_from(doc["aggregate_conservative"]),
            rank_min=_bw_from(doc["rank_min"]),
            rank_mean=_bw_from(doc["rank_mean"]),
            rank_max=_bw_from(doc["rank_max"]),
            validated=doc["validated"],
            ranks=tuple(_rank_from(r) for r in doc["ranks"]),
        )
    except (KeyError, TypeError) as e:
        raise ParseError(f"missing or malformed field: {e}", field=str(e)) from None
