"""Command-line integration tests, driven through real subprocesses."""

import json
import os
import subprocess
import sys

import pytest

from dstream import report, runtime
from dstream.cli import build_parser, parse_triples
from dstream.runtime import Triples


def run_cli(args, env_extra=None, timeout=120):
    env = dict(os.environ)
    src = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir, "src"))
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "dstream"] + args,
                          capture_output=True, text=True, env=env,
                          timeout=timeout)


def find_run_dir(out):
    entries = [e for e in os.listdir(out)
               if os.path.isdir(os.path.join(out, e))]
    assert len(entries) == 1, entries
    return os.path.join(out, entries[0])


# ---------------------------------------------------------------------------
# argument handling


def test_parse_triples():
    assert parse_triples("1,4,2") == Triples(1, 4, 2)
    assert parse_triples(" 2 , 2 , 1 ") == Triples(2, 2, 1)


def test_parse_triples_rejects_garbage():
    import argparse
    with pytest.raises(argparse.ArgumentTypeError):
        parse_triples("1,2")
    with pytest.raises(argparse.ArgumentTypeError):
        parse_triples("0,1,1")


def test_parser_defaults():
    args = build_parser().parse_args(["run"])
    assert args.n_per_proc == 2 ** 24
    assert args.nt == 10
    assert args.dist == "block"
    assert args.pin is True
    assert args.format == "json"


def test_env_overrides_defaults(monkeypatch):
    monkeypatch.setenv("DSTREAM_N_PER_PROC", "4096")
    monkeypatch.setenv("DSTREAM_DIST", "cyclic")
    monkeypatch.setenv("DSTREAM_PIN", "0")
    args = build_parser().parse_args(["run"])
    assert args.n_per_proc == 4096
    assert args.dist == "cyclic"
    assert args.pin is False


def test_explicit_flag_beats_env(monkeypatch):
    monkeypatch.setenv("DSTREAM_NT", "99")
    args = build_parser().parse_args(["run", "--nt", "3"])
    assert args.nt == 3


# ---------------------------------------------------------------------------
# run


def test_run_two_procs_end_to_end(tmp_path):
    out = str(tmp_path / "out")
    r = run_cli(["run", "--triples", "1,2,1", "--n-per-proc", "4096",
                 "--nt", "3", "--out", out, "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr
    run_dir = find_run_dir(out)
    for name in ("report.json", "ranks.json", "table.csv"):
        assert os.path.exists(os.path.join(run_dir, name)), name

    with open(os.path.join(run_dir, "report.json"), "rb") as f:
        rep = report.deserialize(f.read(), "json")
    assert rep.validated
    assert rep.n_global == 2 * 4096
    assert rep.triples == Triples(1, 2, 1)
    assert len(rep.ranks) == 2
    # round-trip the written document
    assert report.deserialize(report.serialize(rep, "json"), "json") == rep

    with open(os.path.join(run_dir, "table.csv")) as f:
        rows = report.parse_table(f.read())
    assert rows[0].np == 2 and rows[0].validated


def test_run_serial_defaults_to_one_proc(tmp_path):
    out = str(tmp_path / "out")
    r = run_cli(["run", "--n-per-proc", "2048", "--nt", "2", "--out", out,
                 "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr
    with open(os.path.join(find_run_dir(out), "report.json"), "rb") as f:
        rep = report.deserialize(f.read(), "json")
    assert rep.triples.np == 1


def test_run_rejects_zero_trials(tmp_path):
    r = run_cli(["run", "--nt", "0", "--out", str(tmp_path)])
    assert r.returncode != 0
    assert "nt" in (r.stdout + r.stderr).lower()


def test_run_rejects_overlap_on_cyclic(tmp_path):
    r = run_cli(["run", "--dist", "cyclic", "--overlap", "1",
                 "--out", str(tmp_path)])
    assert r.returncode != 0


def test_run_csv_format(tmp_path):
    out = str(tmp_path / "out")
    r = run_cli(["run", "--n-per-proc", "2048", "--nt", "2", "--out", out,
                 "--format", "csv", "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr
    run_dir = find_run_dir(out)
    with open(os.path.join(run_dir, "report.csv"), "rb") as f:
        rows = report.deserialize(f.read(), "csv")
    assert rows[0].validated
    assert os.path.exists(os.path.join(run_dir, "ranks.csv"))


def test_run_dist_variants_validate(tmp_path):
    for i, dist in enumerate(("cyclic", "blockcyclic")):
        out = str(tmp_path / f"out{i}")
        r = run_cli(["run", "--triples", "1,2,1", "--n-per-proc", "2048",
                     "--nt", "2", "--dist", dist, "--block-size", "8",
                     "--out", out, "--no-pin"])
        assert r.returncode == 0, (dist, r.stdout, r.stderr)


def test_checksums_identical_across_distributions(tmp_path):
    # same inputs, different placement: anti-elision checksums agree
    sums = {}
    for dist in ("block", "cyclic"):
        out = str(tmp_path / dist)
        r = run_cli(["run", "--triples", "1,2,1", "--n-per-proc", "2048",
                     "--nt", "3", "--dist", dist, "--out", out, "--no-pin"])
        assert r.returncode == 0
        with open(os.path.join(find_run_dir(out), "ranks.json")) as f:
            ranks = json.load(f)
        sums[dist] = sum(r["checksum"] for r in ranks)
    assert sums["block"] == sums["cyclic"]


def test_run_with_overlap_still_validates(tmp_path):
    out = str(tmp_path / "out")
    r = run_cli(["run", "--triples", "1,2,1", "--n-per-proc", "2048",
                 "--nt", "2", "--overlap", "4", "--out", out, "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr


# ---------------------------------------------------------------------------
# worker contract


def test_worker_missing_run_id_exits_usage(tmp_path):
    r = run_cli(["worker", "--pid", "0", "--np", "2",
                 "--comm-dir", str(tmp_path)])
    assert r.returncode == 2
    assert "MissingParameter" in r.stdout + r.stderr


def test_worker_rank_out_of_range(tmp_path):
    r = run_cli(["worker", "--pid", "4", "--np", "4",
                 "--comm-dir", str(tmp_path), "--run-id", "r"])
    assert r.returncode == 2
    assert "RankOutOfRange" in r.stdout + r.stderr


def test_worker_duplicate_pid_aborts(tmp_path):
    comm = str(tmp_path)
    runtime.init(pid=0, np=2, comm_dir=comm, run_id="dup", env={})
    r = run_cli(["worker", "--pid", "0", "--np", "2", "--comm-dir", comm,
                 "--run-id", "dup", "--nt", "1", "--n-per-proc", "64"])
    assert r.returncode == 2
    assert "DuplicateRank" in r.stdout + r.stderr


def test_worker_serial_behaves_as_benchmark(tmp_path):
    out = str(tmp_path / "out")
    comm = str(tmp_path / "comm")
    os.makedirs(comm)
    r = run_cli(["worker", "--pid", "0", "--np", "1", "--comm-dir", comm,
                 "--run-id", "solo", "--threads", "1", "--n-per-proc", "512",
                 "--nt", "2", "--out", out, "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr
    assert os.path.exists(os.path.join(out, "solo", "report.json"))


# ---------------------------------------------------------------------------
# sweep


def test_sweep_two_points(tmp_path):
    out = str(tmp_path / "out")
    r = run_cli(["sweep", "--np-list", "1,2", "--n-per-proc", "2048",
                 "--nt", "2", "--out", out, "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr
    sweeps = [e for e in os.listdir(out) if e.startswith("sweep-")]
    assert len(sweeps) == 1
    with open(os.path.join(out, sweeps[0])) as f:
        rows = report.parse_table(f.read())
    assert [row.np for row in rows] == [1, 2]
    assert rows[1].n_global == 2 * rows[0].n_global
    assert all(row.validated for row in rows)


def test_sweep_rejects_non_ascending(tmp_path):
    r = run_cli(["sweep", "--np-list", "2,1", "--out", str(tmp_path)])
    assert r.returncode == 2
    assert "ascending" in r.stdout + r.stderr


def test_sweep_rejects_empty_list(tmp_path):
    r = run_cli(["sweep", "--np-list", ",", "--out", str(tmp_path)])
    assert r.returncode == 2


def test_sweep_single_point(tmp_path):
    out = str(tmp_path / "out")
    r = run_cli(["sweep", "--np-list", "1", "--n-per-proc", "1024",
                 "--nt", "1", "--out", out, "--no-pin"])
    assert r.returncode == 0, r.stdout + r.stderr
    sweeps = [e for e in os.listdir(out) if e.startswith("sweep-")]
    with open(os.path.join(out, sweeps[0])) as f:
        assert len(report.parse_table(f.read())) == 1


# ---------------------------------------------------------------------------
# validate


def test_validate_passes_and_prints_check_lines():
    r = run_cli(["validate"], timeout=300)
    assert r.returncode == 0, r.stdout + r.stderr
    lines = [ln for ln in r.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 16  # 12 equivalence + 3 closed-form + fuzzing
    assert all(ln.startswith("PASS") for ln in lines)


def test_validate_fails_under_q_perturbation():
    r = run_cli(["validate"], env_extra={"DSTREAM_PERTURB_Q": "0.001"},
                timeout=300)
    assert r.returncode != 0
    assert "FAIL" in r.stdout
