"""L1-regularized Cox regression: a small solution path.

The covariate matrix is column-split over ranks; the proximal-gradient
loop needs one replicated length-m vector pipeline per iteration (linear
predictor, risk weights, cumulative risk sums, fused P-delta) and keeps
the coefficient vector distributed.

Run with:  python demos/05_cox_lasso.py
"""

import numpy as np

from blockstat import (
    ConvergenceMonitor,
    ReduceOp,
    cox_fit,
    cox_init,
    distribute,
    gather_full,
    reduce_all,
    run_inproc,
)


def lasso_path(comm):
    m, n = 120, 40
    gen = np.random.Generator(np.random.Philox(13))
    x_d = gen.standard_normal((m, n))
    beta_true = np.zeros(n)
    beta_true[:4] = [0.9, -0.8, 0.7, -0.6]
    times = gen.exponential(1.0 / np.exp(x_d @ beta_true))
    delta = (gen.random(m) > 0.3).astype(np.float64)
    order = np.argsort(-times)

    x = distribute(x_d[order] if comm.rank == 0 else None, comm)
    state = cox_init(x, times[order], delta[order], lam=1e300)
    cox_fit(state, 1, trace_every=0)  # gradient at beta = 0
    lam_max = state.sigma * reduce_all(state.grad, ReduceOp.MAX, transform=np.abs)

    path = []
    for lam in np.geomspace(lam_max, lam_max / 40, 12):
        state.lam = float(lam)
        cox_fit(state, 400, monitor=ConvergenceMonitor())
        beta = gather_full(state.beta)
        path.append((lam, int(np.count_nonzero(beta)), beta.copy()))
    return path


if __name__ == "__main__":
    path = run_inproc(2, lasso_path)[0]
    print(" lambda      nonzeros   first four coefficients")
    for lam, size, beta in path:
        lead = np.array2string(beta[:4], precision=3, suppress_small=True)
        print(f"{lam:10.3e}  {size:5d}      {lead}")
    print("\nthe four true signals enter first and grow as the penalty shrinks")
