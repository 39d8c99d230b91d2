"""Walk through the distributed array basics on four in-process ranks.

Run with:  python demos/01_distributed_arrays.py
"""

import numpy as np

from blockstat import (
    ReduceOp,
    distribute,
    empty,
    gather_full,
    map_broadcast,
    rand_fill,
    reduce_all,
    reduce_dims,
    run_inproc,
    scan,
    soft_threshold,
)


def demo(comm):
    # A (3, 7) matrix split along its last dimension over 4 ranks:
    # ranks 0-2 hold (3, 2) blocks, rank 3 holds (3, 1).
    a = empty((3, 7), comm)
    if comm.rank == 0:
        print(f"global shape {a.shape}, partition widths {a.partition.counts()}")

    # common_init generates the array on rank 0 and scatters it, so the
    # content is the same no matter how many ranks participate.
    rand_fill(a, seed=42, common_init=True)

    # distribute() ships a dense array living on rank 0.
    data = np.arange(1, 5) if comm.rank == 0 else None
    d = distribute(data, comm)
    print(f"rank {comm.rank} owns {d.local.tolist()} of [1, 2, 3, 4]")

    # Elementwise work never communicates.  Replicated operands broadcast
    # against the distributed blocks; here a (3, 1) column and a scalar.
    col = np.array([[1.0], [0.0], [-1.0]])
    b = empty((3, 7), comm)
    map_broadcast(b, lambda x, c: soft_threshold(x + c, 0.25), a, col)

    # Reductions: full folds, directional sums, and running scans.
    total = reduce_all(a)
    sq = reduce_all(a, transform=np.square)
    biggest = reduce_all(a, ReduceOp.MAX)
    row_sums = reduce_dims(a, 1)          # replicated (3, 1)
    col_sums = reduce_dims(a, 0)          # distributed (1, 7)
    running = empty((3, 7), comm)
    scan(running, a, axis=1)              # cumulative along the split axis

    # gather_full is a collective: every rank must call it, even if only
    # rank 0 prints the result.
    full_cols = gather_full(col_sums)
    full_running = gather_full(running)
    full_a = gather_full(a)
    if comm.rank == 0:
        print(f"sum={total:.4f}  sum of squares={sq:.4f}  max={biggest:.4f}")
        print(f"row sums (replicated): {row_sums.ravel().round(3)}")
        print(f"column sums (gathered): {full_cols.ravel().round(3)}")
        print("cumulative sums equal numpy:",
              np.allclose(full_running, np.cumsum(full_a, axis=1)))
    return gather_full(b)


if __name__ == "__main__":
    results = run_inproc(4, demo)
    assert all(np.array_equal(r, results[0]) for r in results)
    print("every rank gathered identical content")
