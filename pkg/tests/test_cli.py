"""CLI and matrix-file behavior, including a real two-process socket run."""

import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from blockstat.cli import FormatError, read_matrix, run, write_matrix
from blockstat.comm import run_inproc
from blockstat.distarray import distribute, gather_full
from conftest import free_port, rng


def _read_trace(path):
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iter,objective,elapsed_s"
    return [tuple(float(v) for v in line.split(",")) for line in lines[1:]]


# -- matrix file format ----------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64])
@pytest.mark.parametrize("p", [1, 4])
def test_matrix_roundtrip(tmp_path, dtype, p):
    gen = rng(5)
    data = (gen.random((3, 7)) * 10).astype(dtype)
    path = tmp_path / "m.dsta"

    def fn(comm):
        a = distribute(data if comm.rank == 0 else None, comm)
        write_matrix(path, a)
        comm.barrier()
        return gather_full(read_matrix(path, comm))

    for full in run_inproc(p, fn):
        np.testing.assert_array_equal(full, data)


def test_matrix_bad_magic(tmp_path):
    path = tmp_path / "bad.dsta"
    path.write_bytes(b"NOPE" + b"\x00" * 32)

    def fn(comm):
        read_matrix(path, comm)

    with pytest.raises(FormatError):
        run_inproc(2, fn)


def test_matrix_truncated_payload(tmp_path):
    path = tmp_path / "short.dsta"
    body = b"DSTA" + struct.pack("<B", 1) + struct.pack("<Q", 2) + struct.pack("<QQ", 2, 2)
    path.write_bytes(body + b"\x00" * 8)  # needs 32 payload bytes

    def fn(comm):
        read_matrix(path, comm)

    with pytest.raises(FormatError):
        run_inproc(1, fn)


def test_matrix_dtype_mismatch_no_cast(tmp_path):
    path = tmp_path / "f32.dsta"
    write_matrix(path, np.ones((2, 2), dtype=np.float32))

    def fn(comm):
        read_matrix(path, comm, dtype=np.float64)

    with pytest.raises(FormatError):
        run_inproc(1, fn)


# -- commands -------------------------------------------------------------------


def test_gen_then_nmf_descending_trace(tmp_path):
    data_path = str(tmp_path / "X.dsta")
    trace_path = tmp_path / "trace.csv"
    assert run(["gen", "--rows", "8", "--cols", "8", "--seed", "1",
                "--out", data_path]) == 0
    assert run(["nmf", "--input", data_path, "--rank", "2", "--iters", "50",
                "--seed", "2", "--trace", str(trace_path),
                "--backend", "inproc:2"]) == 0
    rows = _read_trace(trace_path)
    assert len(rows) == 50
    objectives = [r[1] for r in rows]
    assert np.all(np.diff(objectives) <= 1e-10)


def test_cli_determinism_same_seed(tmp_path):
    out1, out2 = str(tmp_path / "a.dsta"), str(tmp_path / "b.dsta")
    for out in (out1, out2):
        assert run(["gen", "--rows", "5", "--cols", "3", "--seed", "9",
                    "--out", out, "--backend", "inproc:2"]) == 0
    with open(out1, "rb") as f1, open(out2, "rb") as f2:
        assert f1.read() == f2.read()


def test_cox_lambda_dominant_zero_beta(tmp_path):
    data_path = str(tmp_path / "X.dsta")
    beta_path = tmp_path / "beta.dsta"
    assert run(["gen", "--rows", "10", "--cols", "4", "--seed", "3",
                "--dist", "standard_normal", "--out", data_path]) == 0
    assert run(["cox", "--input", data_path, "--lambda", "1e9", "--iters", "5",
                "--seed", "4", "--out", str(beta_path),
                "--backend", "inproc:2"]) == 0

    def fn(comm):
        return gather_full(read_matrix(beta_path, comm))

    np.testing.assert_array_equal(run_inproc(1, fn)[0], np.zeros(4))


def test_cox_with_survival_files(tmp_path):
    gen = rng(31)
    m, n = 12, 3
    x = gen.standard_normal((m, n))
    y = np.sort(gen.random(m))[::-1].copy()
    delta = (gen.random(m) > 0.3).astype(np.float64)
    x_path, y_path, d_path = (str(tmp_path / s) for s in ("X.dsta", "y.dsta", "d.dsta"))
    write_matrix(x_path, x)
    write_matrix(y_path, y)
    write_matrix(d_path, delta)
    beta_path = tmp_path / "beta.dsta"
    assert run(["cox", "--input", x_path, "--time", y_path, "--events", d_path,
                "--lambda", "0.01", "--iters", "30", "--out", str(beta_path),
                "--backend", "inproc:2"]) == 0

    def fn(comm):
        return gather_full(read_matrix(beta_path, comm))

    beta = run_inproc(1, fn)[0]
    assert beta.shape == (n,) and np.isfinite(beta).all()


def test_mds_stress_trace(tmp_path):
    data_path = str(tmp_path / "X.dsta")
    trace_path = tmp_path / "mds.csv"
    assert run(["gen", "--rows", "3", "--cols", "9", "--seed", "5",
                "--out", data_path]) == 0
    assert run(["mds", "--input", data_path, "--embed-dim", "2", "--iters", "40",
                "--seed", "6", "--trace", str(trace_path),
                "--backend", "inproc:3"]) == 0
    objectives = [r[1] for r in _read_trace(trace_path)]
    assert np.all(np.diff(objectives) <= 1e-10)


def test_bench_matmul_reports_tiny_deviation(capsys):
    assert run(["bench", "--op", "matmul", "--scenario", "b", "--rows", "6",
                "--inner", "5", "--cols", "4", "--seed", "7",
                "--backend", "inproc:2"]) == 0
    out = capsys.readouterr().out
    dev = float(out.split("deviation")[1].split("(")[0])
    assert dev <= 1e-12


def test_bench_scan(capsys):
    assert run(["bench", "--op", "scan", "--rows", "4", "--cols", "6",
                "--axis", "1", "--seed", "8", "--backend", "inproc:2"]) == 0
    dev = float(capsys.readouterr().out.split("deviation")[1].split("(")[0])
    assert dev <= 1e-12


def test_usage_error_exit_2():
    assert run(["nmf"]) == 2          # missing required flags
    assert run(["frobnicate"]) == 2   # unknown command


def test_missing_input_exit_1(tmp_path):
    assert run(["nmf", "--input", str(tmp_path / "nope.dsta"), "--rank", "2"]) == 1


def test_dtype_mismatch_exit_1(tmp_path):
    path = str(tmp_path / "x32.dsta")
    assert run(["gen", "--rows", "4", "--cols", "4", "--seed", "1",
                "--precision", "f32", "--out", path]) == 0
    assert run(["nmf", "--input", path, "--rank", "2", "--precision", "f64"]) == 1


def test_env_var_overrides_backend_flag(tmp_path, monkeypatch):
    out = str(tmp_path / "env.dsta")
    monkeypatch.setenv("DISTSTAT_BACKEND", "inproc:3")
    # the flag below is bogus; the env var must win for this to succeed
    assert run(["gen", "--rows", "4", "--cols", "4", "--seed", "1",
                "--out", out, "--backend", "tcp:nowhere"]) == 0
    assert os.path.exists(out)


def test_two_process_socket_run_matches_inproc(tmp_path):
    data_path = str(tmp_path / "X.dsta")
    assert run(["gen", "--rows", "6", "--cols", "6", "--seed", "11",
                "--out", data_path]) == 0
    ref_trace = tmp_path / "ref.csv"
    assert run(["nmf", "--input", data_path, "--rank", "2", "--iters", "10",
                "--seed", "12", "--trace", str(ref_trace),
                "--backend", "inproc:2"]) == 0

    port = free_port()
    hosts = f"127.0.0.1:{port},127.0.0.1:{port}"
    sock_trace = tmp_path / "sock.csv"
    procs = []
    for rank in range(2):
        argv = [sys.executable, "-m", "blockstat.cli", "nmf", "--input", data_path,
                "--rank", "2", "--iters", "10", "--seed", "12",
                "--backend", f"tcp:{hosts},rank={rank}"]
        if rank == 0:
            argv += ["--trace", str(sock_trace)]
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join(
            [os.path.join(os.path.dirname(__file__), "..", "src"),
             env.get("PYTHONPATH", "")])
        procs.append(subprocess.Popen(argv, env=env))
    for proc in procs:
        assert proc.wait(timeout=120) == 0
    ref = [r[1] for r in _read_trace(ref_trace)]
    sock = [r[1] for r in _read_trace(sock_trace)]
    np.testing.assert_array_equal(sock, ref)
