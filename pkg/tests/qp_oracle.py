"""Brute-force QP oracle: feasibility-filtered grid search, then local polish."""

import itertools
import warnings

import numpy as np
from scipy.optimize import minimize


def random_instance(rng, n=3, max_rows=8, psd_rank=None):
    """Random convex QP with a box and up to ``max_rows`` general rows, feasible by construction."""
    rank = n if psd_rank is None else psd_rank
    M = rng.normal(size=(n, rank))
    H = M @ M.T
    g = rng.normal(size=n) * 2
    lb = -rng.uniform(0.5, 2.0, n)
    ub = rng.uniform(0.5, 2.0, n)
    m = int(rng.integers(0, max_rows + 1))
    A = rng.normal(size=(m, n))
    anchor = rng.uniform(lb, ub)
    b = A @ anchor + rng.uniform(0.0, 1.0, m)
    return H, g, lb, ub, A, b


def brute_force(H, g, lb, ub, A, b, points=25):
    """Global minimum over the feasible set by grid search plus SLSQP polish."""
    n = g.size
    f = lambda u: 0.5 * u @ H @ u + g @ u
    axes = [np.linspace(lb[i], ub[i], points) for i in range(n)]
    grid = np.array(list(itertools.product(*axes)))
    viol = (grid @ A.T - b).max(axis=1, initial=0.0) if A.size else np.zeros(len(grid))
    ok = viol <= 1e-12
    vals = 0.5 * np.einsum("ij,jk,ik->i", grid, H, grid) + grid @ g
    # best feasible grid points, topped up with the least-violating ones for thin feasible sets
    starts = list(grid[ok][np.argsort(vals[ok])[:5]]) + list(grid[np.argsort(viol)[:5]])
    best = None
    cons = [{"type": "ineq", "fun": lambda u: b - A @ u, "jac": lambda u: -A}] if A.size else []
    for u0 in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(f, u0, jac=lambda u: H @ u + g, method="SLSQP", bounds=list(zip(lb, ub)),
                           constraints=cons, options={"ftol": 1e-15, "maxiter": 500})
        u = np.clip(res.x, lb, ub)
        feas = (A @ u - b).max(initial=0.0) <= 1e-9
        if feas and (best is None or f(u) < f(best)):
            best = u
    return best, f(best)
