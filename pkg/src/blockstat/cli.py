"""Command-line driver: data generation, solver runs, benchmark checks.

Subcommands
-----------
``gen``    write a random matrix to a ``.dsta`` file
``nmf``    factorize a matrix, both update rules available
``mds``    embed points (columns of the input) into few dimensions
``cox``    L1-regularized proportional-hazards fit
``bench``  run one matmul scenario or a scan against its dense oracle

Every command runs on all ranks of the configured backend; only rank 0
touches the filesystem.  The backend comes from ``--backend`` unless the
environment variable ``DISTSTAT_BACKEND`` is set, which overrides the flag.

Matrix files are binary: magic ``DSTA``, one dtype byte (0=f32, 1=f64,
2=i64), the number of dimensions as a little-endian u64, one u64 extent per
dimension, then the payload as column-major little-endian scalars.

Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 collective
contract violation.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import time

import numpy as np

from . import comm as _comm
from .comm import CollectiveContractError, CommError, CommInitError
from .distarray import DistArray, empty, gather_full, rand_fill
from .distlinalg import SCENARIOS, matmul, pairwise_euclidean
from .distarray import distribute, scan as _scan
from .solvers import (
    ConvergenceMonitor,
    cox_fit,
    cox_init,
    mds_fit,
    mds_init,
    nmf_apg,
    nmf_init,
    nmf_multiplicative,
)
from .testing import materialize, scenario_operands

_MAGIC = b"DSTA"
_DTYPE_BY_CODE = {0: np.dtype(np.float32), 1: np.dtype(np.float64), 2: np.dtype(np.int64)}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}
_PRECISION = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


class FormatError(ValueError):
    """Matrix file violates the on-disk format."""


def write_matrix(path, array):
    """Write a distributed (or plain) array; rank 0 performs the I/O."""
    if isinstance(array, DistArray):
        data = gather_full(array)
        comm = array.comm
    else:
        data = np.asarray(array)
        comm = None
    if comm is None or comm.rank == 0:
        if data.dtype not in _CODE_BY_DTYPE:
            raise FormatError(f"unsupported dtype {data.dtype}")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<B", _CODE_BY_DTYPE[data.dtype]))
            fh.write(struct.pack("<Q", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(np.ravel(data, order="F").astype(data.dtype).tobytes())


def _read_header(fh):
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (code,) = struct.unpack("<B", fh.read(1))
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"unknown dtype code {code}")
    (ndim,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    return code, shape


def read_matrix(path, comm, dtype=None):
    """Read a matrix file on rank 0 and distribute it. No implicit casts."""
    status = np.zeros(1, dtype=np.int64)
    data = None
    message = ""
    if comm.rank == 0:
        try:
            with open(path, "rb") as fh:
                code, shape = _read_header(fh)
                if dtype is not None and _DTYPE_BY_CODE[code] != np.dtype(dtype):
                    raise FormatError(
                        f"file holds {_DTYPE_BY_CODE[code]}, run expects {np.dtype(dtype)}"
                    )
                want = int(np.prod(shape)) * _DTYPE_BY_CODE[code].itemsize
                payload = fh.read()
                if len(payload) != want:
                    raise FormatError(f"payload is {len(payload)} bytes, expected {want}")
                data = np.frombuffer(payload, dtype=_DTYPE_BY_CODE[code]).reshape(
                    shape, order="F")
        except (OSError, FormatError) as exc:
            status[0] = 1
            message = str(exc)
    comm.broadcast(status, root=0)
    if status[0]:
        raise FormatError(message or "rank 0 failed to read the matrix file")
    return distribute(data, comm, root=0)


def _write_trace(path, rows):
    with open(path, "w") as fh:
        fh.write("iter,objective,elapsed_s\n")
        for it, obj, elapsed in rows:
            fh.write(f"{it},{obj!r},{elapsed:.6f}\n")


def _trace_loop(step, iters, trace):
    """Run ``step(i)`` ``iters`` times, recording (iter, objective, seconds)."""
    rows = []
    t0 = time.perf_counter()
    for it in range(iters):
        obj = step(it)
        if obj is None:
            break
        rows.append((it, obj, time.perf_counter() - t0))
    if trace:
        _write_trace(trace, rows)
    return rows


# -- commands -----------------------------------------------------------------


def _cmd_gen(comm, args):
    dtype = _PRECISION[args.precision]
    a = empty((args.rows, args.cols), comm, dtype)
    rand_fill(a, seed=args.seed, common_init=True, dist=args.dist)
    write_matrix(args.out, a)
    if comm.rank == 0:
        print(f"wrote {args.rows}x{args.cols} {args.precision} matrix to {args.out}")
    return 0


def _cmd_nmf(comm, args):
    x = read_matrix(args.input, comm, dtype=_PRECISION[args.precision])
    state = nmf_init(x, args.rank, seed=args.seed)
    algorithm = nmf_apg if args.algorithm == "apg" else nmf_multiplicative

    def step(it):
        algorithm(state, 1)
        return state.trace[-1]

    rows = _trace_loop(step, args.iters, args.trace if comm.rank == 0 else None)
    if args.out_vt:
        write_matrix(args.out_vt, state.Vt)
    if args.out_w:
        write_matrix(args.out_w, state.W)
    if comm.rank == 0:
        print(f"nmf({args.algorithm}) rank={args.rank} iters={len(rows)} "
              f"objective={rows[-1][1]:.6g}")
    return 0


def _cmd_mds(comm, args):
    x = read_matrix(args.input, comm, dtype=_PRECISION[args.precision])
    n = x.shape[1]
    y = empty((n, n), comm, x.dtype)
    pairwise_euclidean(y, x, chunk=args.chunk)
    state = mds_init(y, args.embed_dim, seed=args.seed, perturb=args.perturb)

    def step(it):
        mds_fit(state, 1)
        return state.trace[-1]

    rows = _trace_loop(step, args.iters, args.trace if comm.rank == 0 else None)
    if args.out:
        write_matrix(args.out, state.theta)
    if comm.rank == 0:
        print(f"mds q={args.embed_dim} iters={len(rows)} stress={rows[-1][1]:.6g}")
    return 0


def _synthetic_survival(m, seed, dtype):
    gen = np.random.Generator(np.random.Philox(0 if seed is None else seed + 1))
    y = np.arange(m, 0, -1, dtype=np.float64)  # distinct, nonincreasing
    delta = (gen.random(m) > 0.3).astype(dtype)
    return y, delta


def _read_vector(path, comm, dtype):
    vec = read_matrix(path, comm, dtype=dtype)
    return gather_full(vec).reshape(-1)


def _cmd_cox(comm, args):
    dtype = _PRECISION[args.precision]
    x = read_matrix(args.input, comm, dtype=dtype)
    m = x.shape[0]
    if args.time and args.events:
        y = _read_vector(args.time, comm, np.float64)
        delta = _read_vector(args.events, comm, dtype)
    else:
        y, delta = _synthetic_survival(m, args.seed, dtype)
    state = cox_init(x, y, delta, lam=args.lam, sigma=args.sigma, ties=args.ties)
    monitor = ConvergenceMonitor() if args.monitor else None

    def step(it):
        before = len(state.trace)
        cox_fit(state, 1, monitor=monitor)
        if len(state.trace) == before:  # monitor fired before stepping
            return None
        return state.trace[-1]

    rows = _trace_loop(step, args.iters, args.trace if comm.rank == 0 else None)
    if args.out:
        write_matrix(args.out, state.beta)
    nnz = int(np.count_nonzero(gather_full(state.beta)))
    if comm.rank == 0 and rows:
        print(f"cox lambda={args.lam:g} iters={len(rows)} "
              f"objective={rows[-1][1]:.6g} nonzeros={nnz}")
    return 0


def _cmd_bench(comm, args):
    gen = np.random.Generator(np.random.Philox(args.seed or 0))
    if args.op == "matmul":
        row = args.scenario
        if row not in SCENARIOS:
            raise FormatError(f"unknown scenario {row!r}")
        vector = SCENARIOS[row][1] in ("dvec", "rvec") or SCENARIOS[row][2] in ("dvec", "rvec")
        a_dense = gen.random((args.rows, args.inner))
        b_dense = gen.random(args.inner) if vector else gen.random((args.inner, args.cols))
        c, a, b = scenario_operands(row, a_dense, b_dense, comm)
        t0 = time.perf_counter()
        matmul(c, a, b)
        elapsed = time.perf_counter() - t0
        want = a_dense @ b_dense
        dev = float(np.max(np.abs(materialize(c).reshape(want.shape) - want)))
        if comm.rank == 0:
            print(f"matmul scenario {row}: max abs deviation {dev:.3e} "
                  f"({elapsed * 1e3:.2f} ms)")
        return 0
    # scan benchmark
    data = gen.random((args.rows, args.cols))
    d = distribute(data if comm.rank == 0 else None, comm)
    out = empty(d.shape, comm, d.dtype)
    t0 = time.perf_counter()
    _scan(out, d, axis=args.axis)
    elapsed = time.perf_counter() - t0
    dev = float(np.max(np.abs(gather_full(out) - np.cumsum(data, axis=args.axis))))
    if comm.rank == 0:
        print(f"scan axis={args.axis}: max abs deviation {dev:.3e} "
              f"({elapsed * 1e3:.2f} ms)")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "nmf": _cmd_nmf,
    "mds": _cmd_mds,
    "cox": _cmd_cox,
    "bench": _cmd_bench,
}


def _add_common(sub):
    sub.add_argument("--backend", default="inproc:1",
                     help="inproc:<P> or tcp:host:port,...,rank=<r> "
                          "(DISTSTAT_BACKEND overrides)")
    sub.add_argument("--precision", choices=("f32", "f64"), default="f64")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--trace", default=None, help="CSV path for the objective trace")


def _build_parser():
    parser = argparse.ArgumentParser(prog="blockstat",
                                     description="distributed arrays and solvers")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate a random matrix file")
    gen.add_argument("--rows", type=int, required=True)
    gen.add_argument("--cols", type=int, required=True)
    gen.add_argument("--dist", choices=("uniform01", "standard_normal"),
                     default="uniform01")
    gen.add_argument("--out", required=True)
    _add_common(gen)

    nmf = subs.add_parser("nmf", help="nonnegative matrix factorization")
    nmf.add_argument("--input", required=True)
    nmf.add_argument("--rank", type=int, required=True)
    nmf.add_argument("--iters", type=int, default=100)
    nmf.add_argument("--algorithm", choices=("multiplicative", "apg"),
                     default="multiplicative")
    nmf.add_argument("--out-vt", default=None)
    nmf.add_argument("--out-w", default=None)
    _add_common(nmf)

    mds = subs.add_parser("mds", help="multidimensional scaling of the input columns")
    mds.add_argument("--input", required=True)
    mds.add_argument("--embed-dim", type=int, required=True)
    mds.add_argument("--iters", type=int, default=100)
    mds.add_argument("--chunk", type=int, default=64)
    mds.add_argument("--perturb", action="store_true",
                     help="perturb coincident points instead of failing")
    mds.add_argument("--out", default=None)
    _add_common(mds)

    cox = subs.add_parser("cox", help="L1-regularized Cox regression")
    cox.add_argument("--input", required=True)
    cox.add_argument("--lambda", dest="lam", type=float, required=True)
    cox.add_argument("--iters", type=int, default=1000)
    cox.add_argument("--sigma", type=float, default=None,
                     help="step size (default 1 / (2 ||X||_2^2))")
    cox.add_argument("--time", default=None, help="observed-time vector file")
    cox.add_argument("--events", default=None, help="event-indicator vector file")
    cox.add_argument("--ties", choices=("none", "breslow"), default="none")
    cox.add_argument("--monitor", action="store_true",
                     help="stop early on the windowed relative-change rule")
    cox.add_argument("--out", default=None)
    _add_common(cox)

    bench = subs.add_parser("bench", help="oracle-checked micro benchmarks")
    bench.add_argument("--op", choices=("matmul", "scan"), default="matmul")
    bench.add_argument("--scenario", default="a")
    bench.add_argument("--rows", type=int, default=6)
    bench.add_argument("--inner", type=int, default=5)
    bench.add_argument("--cols", type=int, default=4)
    bench.add_argument("--axis", type=int, default=1)
    _add_common(bench)
    return parser


def run(argv=None):
    """Parse flags and execute the command on every rank; returns exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    backend = os.environ.get("DISTSTAT_BACKEND") or args.backend
    try:
        statuses = _comm.launch(backend, _COMMANDS[args.command], args)
        return max(statuses)
    except CollectiveContractError as exc:
        print(f"error: collective contract violation: {exc}", file=sys.stderr)
        return 3
    except (OSError, FormatError, ValueError, CommInitError, CommError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
