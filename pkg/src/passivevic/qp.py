"""Small dense convex QP solver (primal active-set method).

Solves::

    min  0.5 u^T H u + g^T u
    s.t. lb <= u <= ub,  A u <= b

with ``H`` symmetric positive semidefinite. Constraint indices follow one
convention everywhere (active sets, multipliers, certificates):
``0..n-1`` are the lower bounds, ``n..2n-1`` the upper bounds and ``2n + j``
the ``j``-th general row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
UNBOUNDED = "unbounded"

FEAS_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H must be square, got {H.shape}")
        if np.abs(H - H.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(H).max(initial=0.0)):
            raise ValueError("H must be symmetric")
        H = 0.5 * (H + H.T)
        off = H - np.diag(np.diag(H))
        lam_min = np.diag(H).min(initial=0.0) if not off.any() else (np.linalg.eigvalsh(H).min() if n else 0.0)
        if lam_min < -1e-10 * max(1.0, np.abs(H).max(initial=0.0) * n):
            raise ValueError("H must be positive semidefinite")
        g = np.asarray(self.g, dtype=float).reshape(n)
        lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(n)
        ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(n)
        if np.any(lb > ub):
            raise ValueError("lb must not exceed ub")
        A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, n)
        b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.size:
            raise ValueError("A and b disagree in row count")
        for name, v in (("H", H), ("g", g), ("A", A), ("b", b)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
        for name, v in (("H", H), ("g", g), ("lb", lb), ("ub", ub), ("A", A), ("b", b)):
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def m(self) -> int:
        return self.b.size

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.g @ u)

    def rows(self) -> tuple[np.ndarray, np.ndarray]:
        """All constraints as ``C u <= d`` in index convention order (infinite rows kept)."""
        eye = np.eye(self.n)
        C = np.vstack([-eye, eye, self.A])
        d = np.concatenate([-self.lb, self.ub, self.b])
        return C, d


@dataclass
class QpSolution:
    u: np.ndarray
    objective: float
    status: str
    active_set: tuple[int, ...] = ()
    iterations: int = 0
    multipliers: np.ndarray | None = None
    certificate: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float
    multipliers: np.ndarray = field(repr=False, default=None)

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


def _normalised_rows(p: QpProblem):
    C, d = p.rows()
    norms = np.linalg.norm(C, axis=1)
    keep = np.isfinite(d) & (norms > 0)
    bad = np.flatnonzero(np.isfinite(d) & (norms == 0) & (d < 0))
    idx = np.flatnonzero(keep)
    return C[idx] / norms[idx, None], d[idx] / norms[idx], idx, norms[idx], bad


def _null_space(Cw: np.ndarray, n: int) -> np.ndarray:
    if Cw.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(Cw)
    rank = int((s > 1e-12 * max(1.0, s[0])).sum())
    return vt[rank:].T


def _active_set_core(H, g, C, d, u, work, max_iter, tol=1e-12):
    """Primal active-set iterations from a feasible ``u`` and working set ``work``.

    Returns ``(u, work, status, iterations, mu)`` where ``mu`` are the
    multipliers of the working rows.
    """
    n = u.size
    work = list(work)
    scale = max(1.0, float(np.abs(H).max()) if H.size else 1.0, float(np.abs(g).max()) if g.size else 1.0)
    degenerate = False
    for it in range(1, max_iter + 1):
        grad = H @ u + g
        Cw = C[work] if work else np.zeros((0, n))
        Z = _null_space(Cw, n)
        p = np.zeros(n)
        unbounded_dir = False
        if Z.shape[1]:
            gz = Z.T @ grad
            if np.linalg.norm(gz) > tol * scale * (1 + np.linalg.norm(u)):
                Hz = Z.T @ H @ Z
                w, V = np.linalg.eigh(Hz)
                flat = w <= 1e-11 * max(1.0, abs(w).max(initial=0.0))
                gv = V.T @ gz
                if np.any(flat & (np.abs(gv) > tol * scale)):
                    # descent along zero curvature: move until something blocks
                    p = -Z @ (V[:, flat] @ gv[flat])
                    unbounded_dir = True
                else:
                    pz = -V[:, ~flat] @ (gv[~flat] / w[~flat])
                    p = Z @ pz
        if np.linalg.norm(p) <= 1e-14 * (1 + np.linalg.norm(u)):
            if not work:
                return u, work, OPTIMAL, it, np.zeros(0)
            mu, *_ = np.linalg.lstsq(Cw.T, -grad, rcond=None)
            neg = np.flatnonzero(mu < -1e-12 * scale)
            if neg.size == 0:
                return u, work, OPTIMAL, it, mu
            # Bland-style choice after a degenerate step avoids cycling
            k = int(neg[np.argmin([work[i] for i in neg])]) if degenerate else int(neg[np.argmin(mu[neg])])
            work.pop(k)
            continue
        Cp = C @ p
        slack = d - C @ u
        alpha = math.inf if unbounded_dir else 1.0
        block = -1
        in_work = set(work)
        for i in np.flatnonzero(Cp > 1e-14 * np.linalg.norm(p)):
            if i in in_work:
                continue
            a = max(slack[i], 0.0) / Cp[i]
            if a < alpha or (a == alpha and block >= 0 and i < block):
                alpha, block = a, int(i)
        if math.isinf(alpha):
            return u, work, UNBOUNDED, it, np.zeros(len(work))
        u = u + alpha * p
        degenerate = alpha <= 1e-14
        if block >= 0:
            work.append(block)
    return u, work, MAX_ITER, max_iter, np.zeros(len(work))


def _initial_work(C, d, u, hint=()):
    """Linearly independent rows active at ``u``; rows from ``hint`` first."""
    slack = d - C @ u
    # per-row scale: one huge normalised rhs must not mark distant rows active
    act = [i for i in np.flatnonzero(np.abs(slack) <= 1e-12 * (1 + np.abs(d) + np.linalg.norm(u)))]
    order = [i for i in hint if i in act] + [i for i in act if i not in hint]
    work, basis = [], []
    for i in order:
        r = C[i].copy()
        for q in basis:
            r -= (q @ r) * q
        nr = np.linalg.norm(r)
        if nr > 1e-10 * max(1.0, np.linalg.norm(C[i])):
            basis.append(r / nr)
            work.append(int(i))
    return work


def _phase_one(C, d, u0, max_iter):
    """Minimise ``t`` subject to ``C u - t <= d``, ``t >= 0``.

    Returns ``(u, t, y)`` with ``y`` the row multipliers at the optimum; when
    ``t > 0`` the vector ``y`` is a Farkas certificate (``C^T y = 0``,
    ``y >= 0``, ``d^T y < 0``).
    """
    m, n = C.shape
    Ct = np.vstack([np.hstack([C, -np.ones((m, 1))]), np.hstack([np.zeros((1, n)), [[-1.0]]])])
    dt = np.concatenate([d, [0.0]])
    t0 = max(0.0, float((C @ u0 - d).max(initial=0.0)))
    v = np.concatenate([u0, [t0]])
    work = _initial_work(Ct, dt, v)
    Hh = np.zeros((n + 1, n + 1))
    gh = np.zeros(n + 1)
    gh[-1] = 1.0
    v, work, status, iters, mu = _active_set_core(Hh, gh, Ct, dt, v, work, max_iter * 4)
    y = np.zeros(m)
    for k, i in enumerate(work):
        if i < m:
            y[i] = max(mu[k], 0.0)
    return v[:n], v[-1], y, iters, status


class ActiveSetSolver:
    """Active-set QP solver that remembers the last working set for warm starts."""

    def __init__(self, max_iter: int = 100):
        self.max_iter = max_iter
        self._last_active: tuple[int, ...] = ()
        self._last_u: np.ndarray | None = None

    def reset(self) -> None:
        self._last_active = ()
        self._last_u = None

    def solve(self, p: QpProblem, warm: bool = True) -> QpSolution:
        C, d, idx, norms, bad = _normalised_rows(p)
        n = p.n
        if bad.size:
            cert = np.zeros(2 * n + p.m)
            cert[bad[0]] = 1.0
            return QpSolution(np.zeros(n), math.nan, INFEASIBLE, (), 0, None, cert)
        lb = np.where(np.isfinite(p.lb), p.lb, np.minimum(0.0, p.ub))
        ub = np.where(np.isfinite(p.ub), p.ub, np.maximum(0.0, lb))
        u0 = np.clip(np.zeros(n), lb, ub)
        pos = {int(j): k for k, j in enumerate(idx)}
        hint = ()
        if warm and self._last_u is not None and self._last_u.size == n:
            cand = np.clip(self._last_u, lb, ub)
            if np.all(C @ cand - d <= FEAS_TOL):
                u0 = cand
            hint = tuple(pos[j] for j in self._last_active if j in pos)
        iters = 0
        if C.shape[0] and np.any(C @ u0 - d > FEAS_TOL):
            u0, t, y, iters, st = _phase_one(C, d, u0, self.max_iter)
            if st != OPTIMAL:
                return QpSolution(u0, p.objective(u0), MAX_ITER, (), iters)
            if t > 1e-9:
                cert = np.zeros(2 * n + p.m)
                cert[idx] = y / norms
                return QpSolution(u0, p.objective(u0), INFEASIBLE, (), iters, None, cert)
            u0 = u0 + 0.0
        work = _initial_work(C, d, u0, hint)
        u, work, status, it2, mu = _active_set_core(p.H, p.g, C, d, u0, work, self.max_iter)
        iters += it2
        active = tuple(sorted(int(idx[i]) for i in work))
        mult = np.zeros(2 * n + p.m)
        for k, i in enumerate(work):
            if k < mu.size:
                mult[idx[i]] = mu[k] / norms[i]
        if status == OPTIMAL:
            self._last_active = active
            self._last_u = u.copy()
        return QpSolution(u, p.objective(u), status, active, iters, mult)


def qp_solve(p: QpProblem, max_iter: int = 100) -> QpSolution:
    """Cold-start solve with a fresh solver."""
    return ActiveSetSolver(max_iter).solve(p, warm=False)


def kkt_check(p: QpProblem, u, active_tol: float = 1e-7) -> KktReport:
    """KKT residuals at ``u``.

    Multipliers are recovered by non-negative least squares over the
    constraints whose slack is below ``active_tol``; stationarity is the
    remaining gradient norm (infinity norm) and the dual residual is zero by
    construction.
    """
    u = np.asarray(u, dtype=float)
    C, d = p.rows()
    fin = np.isfinite(d)
    slack = np.where(fin, d - C @ u, np.inf)
    primal = float(max(0.0, -slack[fin].min(initial=np.inf)) if fin.any() else 0.0)
    grad = p.H @ u + p.g
    near = np.flatnonzero(fin & (slack <= active_tol * (1 + np.abs(np.where(fin, d, 0.0)))))
    mult = np.zeros(d.size)
    if near.size:
        mu, _ = nnls(C[near].T, -grad)
        mult[near] = mu
    stat = float(np.abs(grad + C.T @ mult).max(initial=0.0))
    comp = float(np.abs(mult[fin] * slack[fin]).max(initial=0.0))
    return KktReport(stat, primal, 0.0, comp, mult)


# ---------------------------------------------------------------- text dump
def dump_problem(p: QpProblem, path) -> None:
    """Write the problem as labelled blocks, one matrix row per line."""
    fmt = lambda v: " ".join(repr(float(x)) for x in np.ravel(v))
    lines = [f"qp n={p.n} m={p.m}", "H"] + [fmt(r) for r in p.H]
    lines += ["g", fmt(p.g), "lb", fmt(p.lb), "ub", fmt(p.ub), "A"] + [fmt(r) for r in p.A] + ["b", fmt(p.b)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_problem(path) -> QpProblem:
    lines = Path(path).read_text().splitlines()
    head = dict(kv.split("=") for kv in lines[0].split()[1:])
    n, m = int(head["n"]), int(head["m"])
    blocks, key = {}, None
    for line in lines[1:]:
        if line in ("H", "g", "lb", "ub", "A", "b"):
            key = line
            blocks[key] = []
        elif line.strip():
            blocks[key].append([float(x) for x in line.split()])
    arr = lambda k, shape: np.array(blocks.get(k, []), dtype=float).reshape(shape)
    return QpProblem(arr("H", (n, n)), arr("g", (n,)), arr("lb", (n,)), arr("ub", (n,)),
                     arr("A", (m, n)), arr("b", (m,)))
